//! JSON-Lines file formats: candidate pools, preference pairs, SFT targets
//! and utility matrices, plus merging and statistics.
//!
//! Floats are written in the shortest form that parses back to the same
//! `f64`, so every file re-ingests bit-exactly.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scoring::UtilityMatrix;
use crate::types::{Candidate, CandidateSet, Direction, PreferencePair, SftTarget};

/// One line of a candidate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub source_id: String,
    pub source_text: String,
    pub direction: String,
    pub candidate_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
    #[serde(default)]
    pub rewards: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_count: Option<u32>,
}

/// Optional first line of a candidate file: `{"header": {...}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FileHeader {
    /// Name of the policy the log-probabilities were computed under.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_policy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderLine {
    header: FileHeader,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateFile {
    pub header: Option<FileHeader>,
    pub sets: Vec<CandidateSet>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn parse_err(line: usize, message: impl ToString) -> Error {
    Error::Parse {
        line,
        message: message.to_string(),
    }
}

/// Digest of the canonical serialization of `sets`, independent of the
/// input file's whitespace, header and interleaving of sources.
pub fn pool_digest(sets: &[CandidateSet]) -> Result<String> {
    let mut buf = Vec::new();
    write_candidates(
        &CandidateFile {
            header: None,
            sets: sets.to_vec(),
        },
        &mut buf,
    )?;
    Ok(sha256_hex(&buf))
}

/// Path of the provenance sidecar written next to a pair file.
pub fn provenance_path(pairs_path: &Path) -> std::path::PathBuf {
    let mut name = pairs_path.as_os_str().to_owned();
    name.push(".provenance.json");
    name.into()
}

struct PendingSet {
    source_text: String,
    direction: Direction,
    candidates: Vec<Candidate>,
    first_line: usize,
}

/// Parses a candidate stream, grouping records by `source_id` in order of
/// first appearance. Errors carry the 1-based line number.
pub fn read_candidates<R: BufRead>(reader: R) -> Result<CandidateFile> {
    let mut header = None;
    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, PendingSet> = HashMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(trimmed).map_err(|e| parse_err(lineno, e))?;
        if value.get("header").is_some() {
            if header.is_some() || !order.is_empty() {
                return Err(parse_err(lineno, "header must be the first record"));
            }
            let h: HeaderLine = serde_json::from_value(value).map_err(|e| parse_err(lineno, e))?;
            header = Some(h.header);
            continue;
        }
        let rec: CandidateRecord =
            serde_json::from_value(value).map_err(|e| parse_err(lineno, e))?;
        let direction: Direction = rec.direction.parse().map_err(|e| parse_err(lineno, e))?;
        let mut candidate =
            Candidate::new(rec.candidate_id.clone(), rec.text, rec.logprob, rec.rewards)
                .map_err(|e| parse_err(lineno, e))?;
        if let Some(n) = rec.token_count {
            candidate = candidate.with_token_count(n);
        }

        match pending.get_mut(&rec.source_id) {
            Some(set) => {
                if set.source_text != rec.source_text || set.direction != direction {
                    return Err(parse_err(
                        lineno,
                        format!(
                            "source `{}` disagrees with its first record (line {})",
                            rec.source_id, set.first_line
                        ),
                    ));
                }
                if set.candidates.iter().any(|c| c.id() == rec.candidate_id) {
                    return Err(parse_err(
                        lineno,
                        Error::DuplicateCandidate {
                            source_id: rec.source_id,
                            candidate_id: rec.candidate_id,
                        },
                    ));
                }
                set.candidates.push(candidate);
            }
            None => {
                order.push(rec.source_id.clone());
                pending.insert(
                    rec.source_id,
                    PendingSet {
                        source_text: rec.source_text,
                        direction,
                        candidates: vec![candidate],
                        first_line: lineno,
                    },
                );
            }
        }
    }

    let sets = order
        .into_iter()
        .map(|id| {
            let p = pending.remove(&id).expect("every ordered id is pending");
            CandidateSet::new(id, p.source_text, p.direction, p.candidates)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidateFile { header, sets })
}

/// Reads and groups a candidate file.
pub fn ingest_candidates(path: impl AsRef<Path>) -> Result<CandidateFile> {
    let file = fs::File::open(path)?;
    read_candidates(BufReader::new(file))
}

pub fn candidate_records(set: &CandidateSet) -> impl Iterator<Item = CandidateRecord> + '_ {
    set.candidates().iter().map(move |c| CandidateRecord {
        source_id: set.source_id().to_string(),
        source_text: set.source_text().to_string(),
        direction: set.direction().to_string(),
        candidate_id: c.id().to_string(),
        text: c.text().to_string(),
        logprob: c.logprob_opt(),
        rewards: c.rewards().clone(),
        token_count: c.token_count(),
    })
}

pub fn write_candidates<W: Write>(file: &CandidateFile, mut out: W) -> Result<()> {
    if let Some(h) = &file.header {
        serde_json::to_writer(&mut out, &HeaderLine { header: h.clone() })?;
        out.write_all(b"\n")?;
    }
    for set in &file.sets {
        for rec in candidate_records(set) {
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Per-source union of two candidate pools. Sources only present in `extra`
/// are appended after the primary ones.
///
/// Extra candidates must carry a reference log-probability, since CR scores
/// compare likelihoods under one policy.
pub fn merge_candidate_sources(
    primary: Vec<CandidateSet>,
    extra: Vec<CandidateSet>,
) -> Result<Vec<CandidateSet>> {
    for set in &extra {
        if let Some(c) = set.candidates().iter().find(|c| c.logprob_opt().is_none()) {
            return Err(Error::Merge(format!(
                "extra candidate `{}` in source `{}` has no logprob; CR scores require reference-policy likelihoods",
                c.id(),
                set.source_id()
            )));
        }
    }
    let mut extra_by_source: HashMap<String, CandidateSet> = HashMap::new();
    let mut extra_order = Vec::new();
    for set in extra {
        if extra_by_source.contains_key(set.source_id()) {
            return Err(Error::Merge(format!(
                "source `{}` appears twice in the extra pool",
                set.source_id()
            )));
        }
        extra_order.push(set.source_id().to_string());
        extra_by_source.insert(set.source_id().to_string(), set);
    }

    let mut merged = Vec::with_capacity(primary.len() + extra_order.len());
    for set in primary {
        match extra_by_source.remove(set.source_id()) {
            None => merged.push(set),
            Some(more) => {
                if more.direction() != set.direction() {
                    return Err(Error::Merge(format!(
                        "source `{}` has direction {} in the primary pool and {} in the extra pool",
                        set.source_id(),
                        set.direction(),
                        more.direction()
                    )));
                }
                let mut candidates = set.candidates().to_vec();
                candidates.extend(more.candidates().iter().cloned());
                merged.push(
                    CandidateSet::new(
                        set.source_id(),
                        set.source_text(),
                        set.direction().clone(),
                        candidates,
                    )
                    .map_err(|e| Error::Merge(e.to_string()))?,
                );
            }
        }
    }
    for id in extra_order {
        if let Some(set) = extra_by_source.remove(&id) {
            merged.push(set);
        }
    }
    Ok(merged)
}

/// Merges two candidate files after checking that the extra pool declares
/// the same reference policy as the primary one.
pub fn merge_candidate_files(
    primary: CandidateFile,
    extra: CandidateFile,
) -> Result<CandidateFile> {
    let declared = |f: &CandidateFile| f.header.as_ref().and_then(|h| h.reference_policy.clone());
    let extra_policy = declared(&extra).ok_or_else(|| {
        Error::Merge("extra pool must declare `reference_policy` in its header".into())
    })?;
    if let Some(p) = declared(&primary) {
        if p != extra_policy {
            return Err(Error::Merge(format!(
                "reference policy mismatch: primary `{p}`, extra `{extra_policy}`"
            )));
        }
    }
    let header = primary.header.clone().or(extra.header.clone());
    Ok(CandidateFile {
        header,
        sets: merge_candidate_sources(primary.sets, extra.sets)?,
    })
}

fn write_lines<W: Write, T: Serialize>(items: &[T], mut out: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn read_lines<R: BufRead, T: for<'de> Deserialize<'de>>(reader: R) -> Result<Vec<T>> {
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| parse_err(idx + 1, e))?);
    }
    Ok(items)
}

pub fn write_pairs<W: Write>(pairs: &[PreferencePair], out: W) -> Result<()> {
    write_lines(pairs, out)
}

pub fn read_pairs<R: BufRead>(reader: R) -> Result<Vec<PreferencePair>> {
    read_lines(reader)
}

pub fn write_sft_targets<W: Write>(targets: &[SftTarget], out: W) -> Result<()> {
    write_lines(targets, out)
}

pub fn read_sft_targets<R: BufRead>(reader: R) -> Result<Vec<SftTarget>> {
    read_lines(reader)
}

/// One line of a utility-matrix file: the candidate ids followed by the
/// row-major `K×K` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRecord {
    pub source_id: String,
    pub ids: Vec<String>,
    pub values: Vec<f64>,
}

pub fn write_utility_matrices<W: Write>(
    matrices: &[(String, UtilityMatrix)],
    out: W,
) -> Result<()> {
    let records: Vec<UtilityRecord> = matrices
        .iter()
        .map(|(source_id, m)| UtilityRecord {
            source_id: source_id.clone(),
            ids: m.ids().to_vec(),
            values: m.values().to_vec(),
        })
        .collect();
    write_lines(&records, out)
}

pub fn read_utility_matrices<R: BufRead>(reader: R) -> Result<HashMap<String, UtilityMatrix>> {
    let mut out = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtilityRecord = serde_json::from_str(&line).map_err(|e| parse_err(idx + 1, e))?;
        let m = UtilityMatrix::new(rec.ids, rec.values).map_err(|e| parse_err(idx + 1, e))?;
        if out.insert(rec.source_id.clone(), m).is_some() {
            return Err(parse_err(
                idx + 1,
                format!("duplicate source `{}`", rec.source_id),
            ));
        }
    }
    Ok(out)
}

/// Counts over fixed, shared bin edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Histogram {
    fn build(values: &[f64], edges: &[f64]) -> Self {
        let bins = edges.len() - 1;
        let (lo, hi) = (edges[0], edges[bins]);
        let mut counts = vec![0; bins];
        for &v in values {
            let pos = ((v - lo) / (hi - lo) * bins as f64).floor();
            let bin = if pos.is_nan() {
                0
            } else {
                (pos.max(0.0) as usize).min(bins - 1)
            };
            counts[bin] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub reward_gap: f64,
    /// `logprob(rejected) − logprob(chosen)`.
    pub logprob_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationMeans {
    pub chosen_reward: f64,
    pub rejected_reward: f64,
    pub chosen_logprob: f64,
    pub rejected_logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: String,
    pub pairs: usize,
    pub chosen_reward: Histogram,
    pub rejected_reward: Histogram,
    pub chosen_logprob: Histogram,
    pub rejected_logprob: Histogram,
    pub means: PopulationMeans,
    pub scatter: Vec<ScatterPoint>,
}

/// Reward and log-probability distributions of the chosen and rejected
/// sides, per selection method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub reward_edges: Vec<f64>,
    pub logprob_edges: Vec<f64>,
    pub methods: Vec<MethodStats>,
}

fn edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins)
        .map(|i| {
            if i == bins {
                hi
            } else {
                lo + (hi - lo) * i as f64 / bins as f64
            }
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Builds histograms for every method found in `pairs`. Reward bins span
/// `[0, 1]`; log-probability bins span the range of the whole candidate
/// pool, so edges are identical across methods run on the same pool.
pub fn emit_stats(
    pairs: &[PreferencePair],
    sets: &[CandidateSet],
    bins: usize,
) -> Result<StatsReport> {
    if bins == 0 {
        return Err(Error::Config("bins must be >= 1".into()));
    }
    let by_source: HashMap<&str, &CandidateSet> = sets.iter().map(|s| (s.source_id(), s)).collect();

    let mut lp_lo = f64::INFINITY;
    let mut lp_hi = f64::NEG_INFINITY;
    for c in sets.iter().flat_map(|s| s.candidates()) {
        if let Some(lp) = c.logprob_opt() {
            lp_lo = lp_lo.min(lp);
            lp_hi = lp_hi.max(lp);
        }
    }
    if !lp_lo.is_finite() {
        (lp_lo, lp_hi) = (-1.0, 0.0);
    } else if lp_lo == lp_hi {
        lp_lo -= 1.0;
    }
    let reward_edges = edges(0.0, 1.0, bins);
    let logprob_edges = edges(lp_lo, lp_hi, bins);

    let mut grouped: BTreeMap<String, Vec<&PreferencePair>> = BTreeMap::new();
    for p in pairs {
        grouped
            .entry(p.method.tag().to_string())
            .or_default()
            .push(p);
    }

    let mut methods = Vec::with_capacity(grouped.len());
    for (method, group) in grouped {
        let (mut cr, mut rr, mut cl, mut rl) = (vec![], vec![], vec![], vec![]);
        let mut scatter = Vec::with_capacity(group.len());
        for p in &group {
            let set = by_source
                .get(p.source_id.as_str())
                .ok_or_else(|| Error::Unresolved(format!("source `{}`", p.source_id)))?;
            let get = |id: &str| {
                set.get(id).ok_or_else(|| {
                    Error::Unresolved(format!("candidate `{id}` in source `{}`", p.source_id))
                })
            };
            let (c, r) = (get(&p.chosen_id)?, get(&p.rejected_id)?);
            let (c_r, r_r, c_l, r_l) = (c.reward()?, r.reward()?, c.logprob()?, r.logprob()?);
            cr.push(c_r);
            rr.push(r_r);
            cl.push(c_l);
            rl.push(r_l);
            scatter.push(ScatterPoint {
                reward_gap: c_r - r_r,
                logprob_gap: r_l - c_l,
            });
        }
        methods.push(MethodStats {
            method,
            pairs: group.len(),
            chosen_reward: Histogram::build(&cr, &reward_edges),
            rejected_reward: Histogram::build(&rr, &reward_edges),
            chosen_logprob: Histogram::build(&cl, &logprob_edges),
            rejected_logprob: Histogram::build(&rl, &logprob_edges),
            means: PopulationMeans {
                chosen_reward: mean(&cr),
                rejected_reward: mean(&rr),
                chosen_logprob: mean(&cl),
                rejected_logprob: mean(&rl),
            },
            scatter,
        });
    }
    Ok(StatsReport {
        reward_edges,
        logprob_edges,
        methods,
    })
}

/// Flat CSV view of the histograms: `method,population,bin_lo,bin_hi,count`.
pub fn stats_csv(report: &StatsReport) -> String {
    let mut out = String::from("method,population,bin_lo,bin_hi,count\n");
    for m in &report.methods {
        let populations = [
            ("chosen_reward", &m.chosen_reward, &report.reward_edges),
            ("rejected_reward", &m.rejected_reward, &report.reward_edges),
            ("chosen_logprob", &m.chosen_logprob, &report.logprob_edges),
            (
                "rejected_logprob",
                &m.rejected_logprob,
                &report.logprob_edges,
            ),
        ];
        for (name, hist, edges) in populations {
            for (i, count) in hist.counts.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    m.method,
                    name,
                    edges[i],
                    edges[i + 1],
                    count
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Method;

    const TWO_BY_THREE: &str = r#"{"source_id":"s1","source_text":"Hallo","direction":"de-en","candidate_id":"a","text":"Hello","logprob":-2.5,"rewards":{"kiwi":0.9,"xcomet":0.8}}
{"source_id":"s1","source_text":"Hallo","direction":"de-en","candidate_id":"b","text":"Hi","logprob":-1.0,"rewards":{"kiwi":0.5,"xcomet":0.3}}
{"source_id":"s2","source_text":"Welt","direction":"de-en","candidate_id":"a","text":"World","logprob":-0.5,"rewards":{"kiwi":0.7}}
{"source_id":"s1","source_text":"Hallo","direction":"de-en","candidate_id":"c","text":"Hey","logprob":-4.0,"rewards":{"kiwi":0.1,"xcomet":0.2},"token_count":2}
{"source_id":"s2","source_text":"Welt","direction":"de-en","candidate_id":"b","text":"Earth","logprob":-3.0,"rewards":{"kiwi":0.2}}
{"source_id":"s2","source_text":"Welt","direction":"de-en","candidate_id":"c","text":"Globe","logprob":-5.0,"rewards":{"kiwi":0.4}}
"#;

    #[test]
    fn empty_input() {
        let f = read_candidates("".as_bytes()).unwrap();
        assert!(f.sets.is_empty() && f.header.is_none());
    }

    #[test]
    fn groups_non_contiguous_records() {
        let f = read_candidates(TWO_BY_THREE.as_bytes()).unwrap();
        assert_eq!(f.sets.len(), 2);
        assert!(f.sets.iter().all(|s| s.k() == 3));
        assert_eq!(f.sets[0].source_id(), "s1");
        let a = f.sets[0].get("a").unwrap();
        assert!((a.reward().unwrap() - 0.85).abs() < 1e-15);
        assert_eq!(f.sets[0].get("c").unwrap().token_count(), Some(2));
    }

    #[test]
    fn round_trip_is_lossless() {
        let f = read_candidates(TWO_BY_THREE.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_candidates(&f, &mut buf).unwrap();
        let again = read_candidates(buf.as_slice()).unwrap();
        assert_eq!(f, again);
        let mut buf2 = Vec::new();
        write_candidates(&again, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let dup = format!(
            "{}\n{}",
            TWO_BY_THREE.lines().next().unwrap(),
            TWO_BY_THREE.lines().next().unwrap()
        );
        let err = read_candidates(dup.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("duplicate"));

        let bad = TWO_BY_THREE.replace("0.9,", "1.9,");
        let err = read_candidates(bad.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        assert!(err.to_string().contains("reward out of range"));

        let err = read_candidates("{\"nope\":1}\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));

        let bad_lp = TWO_BY_THREE.replace("-0.5", "0.5");
        assert!(matches!(
            read_candidates(bad_lp.as_bytes()).unwrap_err(),
            Error::Parse { line: 3, .. }
        ));
    }

    #[test]
    fn header_round_trips() {
        let text = format!("{{\"header\":{{\"reference_policy\":\"alma\"}}}}\n{TWO_BY_THREE}");
        let f = read_candidates(text.as_bytes()).unwrap();
        assert_eq!(
            f.header.as_ref().unwrap().reference_policy.as_deref(),
            Some("alma")
        );
        let mut buf = Vec::new();
        write_candidates(&f, &mut buf).unwrap();
        assert_eq!(read_candidates(buf.as_slice()).unwrap(), f);
    }

    fn pool(text: &str) -> Vec<CandidateSet> {
        read_candidates(text.as_bytes()).unwrap().sets
    }

    #[test]
    fn merge_examples() {
        let primary = pool(TWO_BY_THREE);
        assert_eq!(
            merge_candidate_sources(primary.clone(), vec![]).unwrap(),
            primary
        );

        let extra = pool(
            r#"{"source_id":"s1","source_text":"Hallo","direction":"de-en","candidate_id":"gpt4","text":"Hello there","logprob":-9.0,"rewards":{"kiwi":0.95}}
{"source_id":"s2","source_text":"Welt","direction":"de-en","candidate_id":"gpt4","text":"The world","logprob":-8.0,"rewards":{"kiwi":0.1}}"#,
        );
        let merged = merge_candidate_sources(primary, extra).unwrap();
        assert!(merged.iter().all(|s| s.k() == 4));

        let collide = pool(
            r#"{"source_id":"s1","source_text":"Hallo","direction":"de-en","candidate_id":"a","text":"x","logprob":-9.0,"rewards":{"kiwi":0.95}}"#,
        );
        assert!(merge_candidate_sources(pool(TWO_BY_THREE), collide).is_err());

        let no_lp = pool(
            r#"{"source_id":"s1","source_text":"Hallo","direction":"de-en","candidate_id":"z","text":"x","rewards":{"kiwi":0.95}}"#,
        );
        let err = merge_candidate_sources(pool(TWO_BY_THREE), no_lp).unwrap_err();
        assert!(err.to_string().contains("likelihoods"));
    }

    #[test]
    fn mixed_pool_picks_extra_only_when_reward_is_maximal() {
        use crate::selectors::select_crpo;
        use crate::types::SelectionConfig;
        let base = r#"{"source_id":"s","source_text":"x","direction":"en-de","candidate_id":"a","text":"a","logprob":-5.0,"rewards":{"r":0.7}}
{"source_id":"s","source_text":"x","direction":"en-de","candidate_id":"b","text":"b","logprob":-2.0,"rewards":{"r":0.4}}
{"source_id":"s","source_text":"x","direction":"en-de","candidate_id":"c","text":"c","logprob":-9.0,"rewards":{"r":0.2}}"#;
        let config = SelectionConfig::default();
        for (reward, expect_extra) in [(0.9, true), (0.5, false)] {
            let extra = format!(
                r#"{{"source_id":"s","source_text":"x","direction":"en-de","candidate_id":"ext","text":"e","logprob":-20.0,"rewards":{{"r":{reward}}}}}"#
            );
            let merged = merge_candidate_sources(pool(base), pool(&extra)).unwrap();
            let o = select_crpo(&merged[0], &config).unwrap();
            assert_eq!(o.pairs[0].chosen_id == "ext", expect_extra);
        }
    }

    #[test]
    fn merge_files_checks_reference_policy() {
        let with = |name: &str, body: &str| {
            read_candidates(
                format!("{{\"header\":{{\"reference_policy\":\"{name}\"}}}}\n{body}").as_bytes(),
            )
            .unwrap()
        };
        let extra_body = r#"{"source_id":"s9","source_text":"x","direction":"de-en","candidate_id":"z","text":"x","logprob":-1.0,"rewards":{"kiwi":0.5}}"#;
        assert!(
            merge_candidate_files(with("alma", TWO_BY_THREE), with("alma", extra_body)).is_ok()
        );
        assert!(
            merge_candidate_files(with("alma", TWO_BY_THREE), with("nllb", extra_body)).is_err()
        );
        let undeclared = read_candidates(extra_body.as_bytes()).unwrap();
        assert!(merge_candidate_files(with("alma", TWO_BY_THREE), undeclared).is_err());
    }

    fn pair(source: &str, w: &str, l: &str) -> PreferencePair {
        PreferencePair {
            source_id: source.into(),
            chosen_id: w.into(),
            rejected_id: l.into(),
            method: Method::CrPlus,
            score: 1.0,
            extras: BTreeMap::new(),
        }
    }

    #[test]
    fn stats_single_pair() {
        let sets = pool(TWO_BY_THREE);
        let report = emit_stats(&[pair("s1", "a", "b")], &sets, 10).unwrap();
        let m = &report.methods[0];
        for h in [
            &m.chosen_reward,
            &m.rejected_reward,
            &m.chosen_logprob,
            &m.rejected_logprob,
        ] {
            assert_eq!(h.total(), 1);
        }
        assert_eq!(report.logprob_edges[0], -5.0);
        assert_eq!(*report.logprob_edges.last().unwrap(), -0.5);
        // CR+ style fixture: rejected is the more likely side
        assert!(m.means.rejected_logprob > m.means.chosen_logprob);
        assert!((m.scatter[0].logprob_gap - 1.5).abs() < 1e-15);
        assert!(stats_csv(&report).lines().count() == 1 + 4 * 10);
    }

    #[test]
    fn stats_conservation_and_errors() {
        let sets = pool(TWO_BY_THREE);
        let pairs = [
            pair("s1", "a", "b"),
            pair("s1", "a", "c"),
            pair("s2", "a", "c"),
        ];
        let report = emit_stats(&pairs, &sets, 7).unwrap();
        for h in [
            &report.methods[0].chosen_reward,
            &report.methods[0].rejected_logprob,
        ] {
            assert_eq!(h.total(), 3);
        }
        assert!(emit_stats(&[pair("s3", "a", "b")], &sets, 5).is_err());
        assert!(emit_stats(&[pair("s1", "a", "zz")], &sets, 5).is_err());
    }

    #[test]
    fn utility_file_round_trip() {
        let sets = pool(TWO_BY_THREE);
        let mats: Vec<(String, UtilityMatrix)> = sets
            .iter()
            .map(|s| (s.source_id().to_string(), UtilityMatrix::builtin(s)))
            .collect();
        let mut buf = Vec::new();
        write_utility_matrices(&mats, &mut buf).unwrap();
        let back = read_utility_matrices(buf.as_slice()).unwrap();
        for (id, m) in &mats {
            assert_eq!(&back[id], m);
        }
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
