//! Brace parsing, empirical output distributions and diversity metrics
//! (entropy in nats, coverage, KL against an enumerable ground truth).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{target_log_probs, CausalLm, TokenSequence};
use crate::numerics::Scalar;
use crate::objective::TargetDistribution;

/// How raw generations are turned into comparable values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParserMode {
    /// Content of the first balanced `{...}`.
    Single,
    /// The first `k` top-level `{...}` fields, in order.
    Multi(usize),
}

impl fmt::Display for ParserMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParserMode::Single => f.write_str("single"),
            ParserMode::Multi(k) => write!(f, "multi {k}"),
        }
    }
}

/// Top-level balanced brace groups of `raw`, contents trimmed. An unmatched
/// `{` ends the scan.
fn top_level_fields(raw: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, ch) in raw.char_indices() {
        match ch {
            '{' => {
                if depth == 0 {
                    start = i + 1;
                }
                depth += 1;
            }
            '}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    out.push(raw[start..i].trim());
                }
            }
            _ => {}
        }
    }
    out
}

/// Content of the first balanced `{...}` in `raw`, trimmed; `None` if there is no complete pair.
pub fn parse_braced(raw: &str) -> Option<String> {
    top_level_fields(raw).first().map(|s| s.to_string())
}

/// First `k` top-level brace fields; `None` unless all `k` are present.
pub fn parse_fields(raw: &str, k: usize) -> Option<Vec<String>> {
    let fields = top_level_fields(raw);
    (fields.len() >= k).then(|| fields[..k].iter().map(|s| s.to_string()).collect())
}

/// Joins record fields into one comparable value.
pub fn join_fields(fields: &[String]) -> String {
    fields.join(" | ")
}

/// Parses `raw` under `mode`, returning the value to count.
pub fn parse(raw: &str, mode: ParserMode) -> Option<String> {
    match mode {
        ParserMode::Single => parse_braced(raw),
        ParserMode::Multi(k) => parse_fields(raw, k).map(|f| join_fields(&f)),
    }
}

/// Counts of parsed outputs plus the number of unparseable ones.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmpiricalDistribution {
    counts: BTreeMap<String, u64>,
    invalid: u64,
}

impl EmpiricalDistribution {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: impl Into<String>) {
        *self.counts.entry(value.into()).or_insert(0) += 1;
    }

    pub fn add_count(&mut self, value: impl Into<String>, count: u64) {
        if count > 0 {
            *self.counts.entry(value.into()).or_insert(0) += count;
        }
    }

    pub fn add_invalid(&mut self) {
        self.invalid += 1;
    }

    /// Associative, commutative combination of two sample sets.
    pub fn merge(&mut self, other: &EmpiricalDistribution) {
        for (k, &c) in &other.counts {
            *self.counts.entry(k.clone()).or_insert(0) += c;
        }
        self.invalid += other.invalid;
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    pub fn count(&self, value: &str) -> u64 {
        self.counts.get(value).copied().unwrap_or(0)
    }

    pub fn invalid_count(&self) -> u64 {
        self.invalid
    }

    pub fn valid_total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// All samples, valid or not.
    pub fn total(&self) -> u64 {
        self.valid_total() + self.invalid
    }

    pub fn invalid_rate(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.invalid as f64 / n as f64,
        }
    }

    pub fn probability(&self, value: &str) -> f64 {
        match self.valid_total() {
            0 => 0.0,
            n => self.count(value) as f64 / n as f64,
        }
    }

    /// Most frequent value and its share of valid samples; ties go to the smaller string.
    pub fn modal(&self) -> Option<(&str, f64)> {
        let n = self.valid_total() as f64;
        self.counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(k, &c)| (k.as_str(), c as f64 / n))
    }

    /// `(value, count)` by descending count, ties by value.
    pub fn plot_rows(&self) -> Vec<(&str, u64)> {
        let mut rows: Vec<(&str, u64)> = self.counts.iter().map(|(k, &c)| (k.as_str(), c)).collect();
        rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        rows
    }

    /// Copy with values lower-cased and merged.
    pub fn case_folded(&self) -> EmpiricalDistribution {
        let mut out = EmpiricalDistribution {
            invalid: self.invalid,
            ..Self::default()
        };
        for (k, &c) in &self.counts {
            out.add_count(k.to_lowercase(), c);
        }
        out
    }
}

/// Parses every sample under `mode` and counts the results by exact string equality.
pub fn empirical<S: AsRef<str>>(samples: &[S], mode: ParserMode) -> EmpiricalDistribution {
    let mut dist = EmpiricalDistribution::new();
    for s in samples {
        match parse(s.as_ref(), mode) {
            Some(v) => dist.add(v),
            None => dist.add_invalid(),
        }
    }
    dist
}

/// Per-field distributions of multi-field records. A record missing any
/// field is invalid in every field.
pub fn empirical_fields<S: AsRef<str>>(samples: &[S], k: usize) -> Vec<EmpiricalDistribution> {
    let mut out = vec![EmpiricalDistribution::new(); k];
    for s in samples {
        match parse_fields(s.as_ref(), k) {
            Some(fields) => out.iter_mut().zip(fields).for_each(|(d, f)| d.add(f)),
            None => out.iter_mut().for_each(EmpiricalDistribution::add_invalid),
        }
    }
    out
}

/// `−Σ p̃ ln p̃` over valid outputs.
pub fn entropy(dist: &EmpiricalDistribution) -> Result<f64> {
    let n = dist.valid_total();
    if n == 0 {
        return Err(Error::UndefinedMetric(format!(
            "entropy of a sample set with no valid outputs ({} invalid)",
            dist.invalid_count()
        )));
    }
    let n = n as f64;
    Ok(dist
        .counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Number of distinct valid outputs.
pub fn coverage(dist: &EmpiricalDistribution) -> usize {
    dist.counts.len()
}

/// Entropy of non-negative weights after normalizing them to sum to one.
pub fn normalized_entropy(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum()
}

/// Whether model probabilities are used as is or renormalized over the target set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum KlMode {
    #[default]
    Unnormalized,
    Renormalized,
}

/// `Σ_y p*(y) ln(p*(y) / p_model(y | prompt))` from exact teacher-forced probabilities.
pub fn kl_to_target<T: Scalar, M: CausalLm<T> + ?Sized>(
    model: &M,
    prompt: &TokenSequence,
    dist: &TargetDistribution,
    mode: KlMode,
) -> Result<f64> {
    let targets: Vec<&TokenSequence> = dist.targets().iter().collect();
    let mut lps: Vec<f64> = target_log_probs(model, prompt, &targets)?
        .into_iter()
        .map(|x| x.as_f64())
        .collect();
    if let Some(bad) = lps.iter().position(|lp| !lp.is_finite()) {
        return Err(Error::Numeric(format!(
            "model log-probability of target `{}` is {}",
            dist.entries()[bad].0,
            lps[bad]
        )));
    }
    if mode == KlMode::Renormalized {
        let max = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lps.iter().map(|lp| (lp - max).exp()).sum::<f64>().ln();
        lps.iter_mut().for_each(|lp| *lp -= lse);
    }
    Ok(dist
        .weights()
        .zip(&lps)
        .filter(|(w, _)| *w > 0.0)
        .map(|(w, lp)| w * (w.ln() - lp))
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldReport {
    pub field: String,
    pub entropy: Option<f64>,
    pub coverage: usize,
    pub modal_value: Option<String>,
    pub modal_frequency: Option<f64>,
}

impl FieldReport {
    pub fn new(field: impl Into<String>, dist: &EmpiricalDistribution) -> Self {
        let modal = dist.modal();
        FieldReport {
            field: field.into(),
            entropy: entropy(dist).ok(),
            coverage: coverage(dist),
            modal_value: modal.map(|(v, _)| v.to_string()),
            modal_frequency: modal.map(|(_, f)| f),
        }
    }
}

/// Diversity summary of one sample set; one JSON object per line in report files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub label: String,
    pub n: u64,
    /// `None` when no output parsed.
    pub entropy: Option<f64>,
    pub coverage: usize,
    pub kl: Option<f64>,
    pub invalid_rate: f64,
    pub modal_value: Option<String>,
    pub modal_frequency: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldReport>,
}

impl MetricReport {
    pub fn new(task: impl Into<String>, label: impl Into<String>, dist: &EmpiricalDistribution, kl: Option<f64>) -> Self {
        let modal = dist.modal();
        MetricReport {
            task: task.into(),
            label: label.into(),
            n: dist.total(),
            entropy: entropy(dist).ok(),
            coverage: coverage(dist),
            kl,
            invalid_rate: dist.invalid_rate(),
            modal_value: modal.map(|(v, _)| v.to_string()),
            modal_frequency: modal.map(|(_, f)| f),
            fields: Vec::new(),
        }
    }

    pub fn with_fields(mut self, names: &[String], dists: &[EmpiricalDistribution]) -> Self {
        self.fields = names.iter().zip(dists).map(|(n, d)| FieldReport::new(n.clone(), d)).collect();
        self
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

/// `label,count` CSV sorted by descending count.
pub fn plot_table(dist: &EmpiricalDistribution) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "count"]).map_err(csv_err)?;
    for (label, count) in dist.plot_rows() {
        w.write_record([label, &count.to_string()]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numeric(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Numeric(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::model::Vocabulary;
    use crate::numerics::{Rng, Stream};
    use crate::testutil::{logits_for, two_step_model};

    fn from_counts(pairs: &[(&str, u64)]) -> EmpiricalDistribution {
        let mut d = EmpiricalDistribution::new();
        for &(k, c) in pairs {
            d.add_count(k, c);
        }
        d
    }

    #[test]
    fn braced_single_values() {
        assert_eq!(parse_braced("{7}").as_deref(), Some("7"));
        assert_eq!(parse_braced("Sure! {Avery} hope that helps").as_deref(), Some("Avery"));
        assert_eq!(parse_braced("{ 12 }").as_deref(), Some("12"));
        assert_eq!(parse_braced("{a{b}c} {d}").as_deref(), Some("a{b}c"));
        assert_eq!(parse_braced("no braces"), None);
        assert_eq!(parse_braced("{unterminated"), None);
        assert_eq!(parse_braced("} {x}").as_deref(), Some("x"));
    }

    #[test]
    fn multi_field_records() {
        assert_eq!(
            parse_fields("{Ada}\n{Female}\n{1901}", 3),
            Some(vec!["Ada".to_string(), "Female".into(), "1901".into()])
        );
        assert_eq!(parse_fields("{Ada} Female {1901}", 3), None);
        assert_eq!(parse("{Female} {1985} {Paris}", ParserMode::Multi(3)).as_deref(), Some("Female | 1985 | Paris"));
    }

    #[test]
    fn missing_field_invalidates_the_whole_record() {
        let fields = empirical_fields(&["{F} {1990} {Oslo}", "{M} 1990 {Rome}"], 3);
        for f in &fields {
            assert_eq!(f.invalid_count(), 1);
            assert_eq!(f.valid_total(), 1);
        }
    }

    #[test]
    fn empirical_counts() {
        let d = empirical(&vec!["{5}"; 1000], ParserMode::Single);
        assert_eq!(d.counts().get("5"), Some(&1000));
        assert_eq!(coverage(&d), 1);
        let d = empirical(&["{1}", "{2}", "oops"], ParserMode::Single);
        assert_eq!(d.valid_total(), 2);
        assert_eq!(d.invalid_count(), 1);
        assert_eq!(d.total(), 3);
        assert!((d.invalid_rate() - 1.0 / 3.0).abs() < 1e-15);
        assert!((d.probability("1") - 0.5).abs() < 1e-15);
    }

    #[test]
    fn case_sensitivity_is_opt_in() {
        let d = empirical(&["{Ava}", "{ava}"], ParserMode::Single);
        assert_eq!(coverage(&d), 2);
        assert_eq!(coverage(&d.case_folded()), 1);
    }

    #[test]
    fn entropy_hand_values() {
        assert_eq!(entropy(&from_counts(&[("5", 1000)])).unwrap(), 0.0);
        let u: Vec<(String, u64)> = (0..10).map(|i| (i.to_string(), 7)).collect();
        let mut d = EmpiricalDistribution::new();
        u.iter().for_each(|(k, c)| d.add_count(k.clone(), *c));
        assert!((entropy(&d).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((entropy(&d).unwrap() - 2.30).abs() < 0.005);
        assert!((entropy(&from_counts(&[("a", 60), ("b", 40)])).unwrap() - 0.67301).abs() < 1e-5);
    }

    #[test]
    fn all_invalid_entropy_is_undefined() {
        let d = empirical(&["x", "y"], ParserMode::Single);
        assert!(matches!(entropy(&d), Err(Error::UndefinedMetric(_))));
        assert!(matches!(entropy(&EmpiricalDistribution::new()), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn coverage_hand_values() {
        assert_eq!(coverage(&EmpiricalDistribution::new()), 0);
        assert_eq!(coverage(&from_counts(&[("5", 999), ("7", 1)])), 2);
    }

    #[test]
    fn uniform_samples_cover_all_ten_digits() {
        let mut rng = Rng::new(11, Stream::Sampling);
        let samples: Vec<String> = (0..1000).map(|_| format!("{{{}}}", rng.below(10))).collect();
        let d = empirical(&samples, ParserMode::Single);
        assert_eq!(coverage(&d), 10);
    }

    #[test]
    fn kl_hand_values() {
        let d = TargetDistribution::uniform(&["a", "b"]).unwrap();
        let matched = two_step_model(&logits_for(&[('a', 0.5), ('b', 0.5)]));
        let prompt = Vocabulary.encode("").unwrap();
        assert!(kl_to_target(&matched, &prompt, &d, KlMode::Unnormalized).unwrap().abs() < 1e-9);
        let skewed = two_step_model(&logits_for(&[('a', 0.9), ('b', 0.1)]));
        let kl = kl_to_target(&skewed, &prompt, &d, KlMode::Unnormalized).unwrap();
        let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl - expect).abs() < 1e-9);
        assert!((kl - 0.51083).abs() < 1e-5);
    }

    #[test]
    fn renormalized_kl_ignores_mass_outside_the_target_set() {
        // Half the first-step mass goes to 'c', outside T.
        let model = two_step_model(&logits_for(&[('a', 0.25), ('b', 0.25), ('c', 0.5)]));
        let d = TargetDistribution::uniform(&["a", "b"]).unwrap();
        let prompt = Vocabulary.encode("").unwrap();
        let raw = kl_to_target(&model, &prompt, &d, KlMode::Unnormalized).unwrap();
        let renorm = kl_to_target(&model, &prompt, &d, KlMode::Renormalized).unwrap();
        assert!((raw - 2f64.ln()).abs() < 1e-9);
        assert!(renorm.abs() < 1e-9);
    }

    #[test]
    fn plot_rows_descend_by_count() {
        let d = from_counts(&[("3", 5), ("5", 60), ("a,b", 5), ("7", 30)]);
        assert_eq!(d.plot_rows(), vec![("5", 60), ("7", 30), ("3", 5), ("a,b", 5)]);
        let csv = plot_table(&d).unwrap();
        assert_eq!(csv, "label,count\n5,60\n7,30\n3,5\n\"a,b\",5\n");
        assert_eq!(d.modal(), Some(("5", 0.6)));
    }

    #[test]
    fn report_json_round_trip() {
        let d = from_counts(&[("5", 60), ("7", 40)]);
        let r = MetricReport::new("rng_1_10", "baseline", &d, Some(0.3))
            .with_fields(&["digit".to_string()], std::slice::from_ref(&d));
        let line = r.to_json_line().unwrap();
        assert!(!line.contains('\n'));
        assert_eq!(MetricReport::from_json_line(&line).unwrap(), r);
        assert_eq!(r.coverage, 2);
        assert_eq!(r.n, 100);
    }

    fn arb_dist() -> impl Strategy<Value = EmpiricalDistribution> {
        (prop::collection::vec(1u64..50, 1..12), 0u64..5).prop_map(|(counts, invalid)| {
            let mut d = EmpiricalDistribution::new();
            for (i, c) in counts.into_iter().enumerate() {
                d.add_count(format!("v{i}"), c);
            }
            (0..invalid).for_each(|_| d.add_invalid());
            d
        })
    }

    proptest! {
        #[test]
        fn entropy_bounded_by_log_coverage(d in arb_dist()) {
            let h = entropy(&d).unwrap();
            let cov = coverage(&d);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (cov as f64).ln() + 1e-12);
            prop_assert!(cov as u64 <= d.total());
            let uniform = d.counts().values().all(|&c| c == *d.counts().values().next().unwrap());
            prop_assert_eq!(uniform, (h - (cov as f64).ln()).abs() < 1e-12);
            prop_assert_eq!(d.valid_total() + d.invalid_count(), d.total());
        }

        #[test]
        fn merge_is_associative_and_commutative(a in arb_dist(), b in arb_dist(), c in arb_dist()) {
            let mut ab = a.clone();
            ab.merge(&b);
            ab.merge(&c);
            let mut bc = b.clone();
            bc.merge(&c);
            let mut a_bc = a.clone();
            a_bc.merge(&bc);
            prop_assert_eq!(&ab, &a_bc);
            let mut ba = b.clone();
            ba.merge(&a);
            let mut ab2 = a.clone();
            ab2.merge(&b);
            prop_assert_eq!(ba, ab2);
        }

        #[test]
        fn kl_is_nonnegative_and_zero_at_a_match(raw in prop::collection::vec(0.05f64..1.0, 2..6)) {
            let total: f64 = raw.iter().sum();
            let chars = ['a', 'b', 'c', 'd', 'e', 'f'];
            let probs: Vec<(char, f64)> = raw.iter().enumerate().map(|(i, w)| (chars[i], w / total)).collect();
            let entries: Vec<(String, f64)> = probs.iter().map(|&(c, p)| (c.to_string(), p)).collect();
            let sum: f64 = entries.iter().map(|(_, w)| w).sum();
            prop_assume!((sum - 1.0).abs() < 1e-12);
            let d = TargetDistribution::new(entries).unwrap();
            let prompt = Vocabulary.encode("").unwrap();
            let matched = two_step_model(&logits_for(&probs));
            prop_assert!(kl_to_target(&matched, &prompt, &d, KlMode::Unnormalized).unwrap().abs() < 1e-9);
            let mut shifted = probs.clone();
            shifted.rotate_left(1);
            let shifted: Vec<(char, f64)> = probs.iter().zip(&shifted).map(|(&(c, _), &(_, p))| (c, p)).collect();
            let other = two_step_model(&logits_for(&shifted));
            prop_assert!(kl_to_target(&other, &prompt, &d, KlMode::Unnormalized).unwrap() >= -1e-12);
        }
    }
}
