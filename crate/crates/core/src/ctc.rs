//! Connectionist temporal classification: collapse map, exact
//! transcription probability, analytic gradient, and decoding.
//!
//! Per-frame distributions range over the alphabet plus a reserved
//! blank at index 0 of the extended class space, so label `j` of the
//! alphabet occupies column `j + 1`. An alignment is collapsed by
//! merging repeated labels and then deleting blanks; the probability
//! of a transcription sums the probabilities of every alignment that
//! collapses onto it. The dynamic program runs entirely in log space
//! over the blank-interleaved label sequence; `brute_force_logprob`
//! enumerates alignments directly and serves as the oracle for the
//! recursion.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    #[error("duplicate label {0:?} in alphabet")]
    DuplicateLabel(String),
    #[error("alphabet is empty")]
    EmptyAlphabet,
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("label index {index} out of range for alphabet of {len}")]
    LabelOutOfRange { index: usize, len: usize },
    #[error("probability row {row} sums to {sum}, expected 1")]
    RowNotNormalized { row: usize, sum: f64 },
    #[error("negative probability {value} at row {row}")]
    NegativeProbability { row: usize, value: f64 },
    #[error("probability sequence must have at least one class column")]
    NoClasses,
    #[error("label needs {needed} steps but the sequence has {steps}")]
    Infeasible { needed: usize, steps: usize },
    #[error("enumeration of {classes}^{steps} alignments exceeds the guard of 10^7")]
    TooLargeToEnumerate { classes: usize, steps: usize },
    #[error("beam width must be >= 1")]
    ZeroBeam,
}

/// Reserved blank index in the extended class space.
pub const BLANK: usize = 0;

/// Ordered label set; the extended class space is blank plus these.
#[derive(Debug, Clone, PartialEq)]
pub struct Alphabet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl Alphabet {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self, CtcError> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(CtcError::EmptyAlphabet);
        }
        let mut index = HashMap::new();
        for (i, label) in labels.iter().enumerate() {
            if index.insert(label.clone(), i).is_some() {
                return Err(CtcError::DuplicateLabel(label.clone()));
            }
        }
        Ok(Self { labels, index })
    }

    /// Alphabet of one-character labels.
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Result<Self, CtcError> {
        Self::new(chars.into_iter().map(|c| c.to_string()))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Class count including the blank.
    pub fn classes_with_blank(&self) -> usize {
        self.labels.len() + 1
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Maps each character of `text` to its label index.
    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>, CtcError> {
        text.chars()
            .map(|c| {
                self.index_of(&c.to_string())
                    .ok_or_else(|| CtcError::UnknownLabel(c.to_string()))
            })
            .collect()
    }

    pub fn decode_to_text(&self, transcription: &[usize]) -> String {
        transcription.iter().map(|&i| self.labels[i].as_str()).collect()
    }
}

/// Per-frame probability rows over the extended class space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbSequence {
    rows: Array2<f64>,
}

impl ProbSequence {
    /// Validates the simplex constraints (rows sum to 1 within 1e-9,
    /// all entries non-negative).
    pub fn new(rows: Array2<f64>) -> Result<Self, CtcError> {
        if rows.ncols() == 0 {
            return Err(CtcError::NoClasses);
        }
        for (t, row) in rows.outer_iter().enumerate() {
            let mut sum = 0.0;
            for &v in row {
                if v < 0.0 {
                    return Err(CtcError::NegativeProbability { row: t, value: v });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(CtcError::RowNotNormalized { row: t, sum });
            }
        }
        Ok(Self { rows })
    }

    /// Row-wise softmax of raw scores; always satisfies the simplex
    /// constraints exactly up to rounding.
    pub fn from_logits(logits: ArrayView2<f64>) -> Self {
        let mut rows = logits.to_owned();
        for mut row in rows.outer_iter_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Self { rows }
    }

    pub fn steps(&self) -> usize {
        self.rows.nrows()
    }

    pub fn classes(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    #[inline]
    pub fn prob(&self, t: usize, class: usize) -> f64 {
        self.rows[(t, class)]
    }
}

/// Collapse map: merge repeated labels, then remove blanks. Input is
/// in the extended class space, output in alphabet indices.
pub fn collapse(alignment: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in alignment {
        if Some(c) != prev && c != BLANK {
            out.push(c - 1);
        }
        prev = Some(c);
    }
    out
}

/// Steps needed to emit `label`: its length plus one separating blank
/// per adjacent repeat.
pub fn required_steps(label: &[usize]) -> usize {
    let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
    label.len() + repeats
}

fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn check_label(label: &[usize], alphabet_len: usize) -> Result<(), CtcError> {
    for &l in label {
        if l >= alphabet_len {
            return Err(CtcError::LabelOutOfRange { index: l, len: alphabet_len });
        }
    }
    Ok(())
}

/// Blank-interleaved extended label in the extended class space.
fn extended_label(label: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * label.len() + 1);
    ext.push(BLANK);
    for &l in label {
        ext.push(l + 1);
        ext.push(BLANK);
    }
    ext
}

/// Log-probability of `label` under `p` via the forward recursion over
/// the blank-interleaved sequence. Infeasible labels (too long for the
/// number of frames) yield `-inf` rather than an error.
pub fn transcription_logprob(p: &ProbSequence, label: &[usize]) -> Result<f64, CtcError> {
    check_label(label, p.classes() - 1)?;
    let steps = p.steps();
    if required_steps(label) > steps {
        return Ok(f64::NEG_INFINITY);
    }
    let (alpha_last, ext) = forward(p, label);
    let s = ext.len();
    let tail = alpha_last[s - 1];
    let result = if s >= 2 {
        logsumexp2(tail, alpha_last[s - 2])
    } else {
        tail
    };
    Ok(result)
}

/// Forward pass; returns the final alpha row and the extended label.
fn forward(p: &ProbSequence, label: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let ext = extended_label(label);
    let s = ext.len();
    let lp = |t: usize, class: usize| p.prob(t, class).ln();
    let mut alpha = vec![f64::NEG_INFINITY; s];
    alpha[0] = lp(0, ext[0]);
    if s > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    let mut next = vec![f64::NEG_INFINITY; s];
    for t in 1..p.steps() {
        for i in 0..s {
            let mut acc = alpha[i];
            if i >= 1 {
                acc = logsumexp2(acc, alpha[i - 1]);
            }
            if i >= 2 && ext[i] != BLANK && ext[i] != ext[i - 2] {
                acc = logsumexp2(acc, alpha[i - 2]);
            }
            next[i] = acc + lp(t, ext[i]);
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    (alpha, ext)
}

/// Enumerates all `classes^steps` alignments, keeps the ones that
/// collapse onto `label`, and sums their path probabilities. Exact but
/// exponential; guarded to at most 10^7 alignments.
pub fn brute_force_logprob(p: &ProbSequence, label: &[usize]) -> Result<f64, CtcError> {
    check_label(label, p.classes() - 1)?;
    let steps = p.steps();
    let classes = p.classes();
    let count = (classes as u64).checked_pow(steps as u32);
    match count {
        Some(n) if n <= 10_000_000 => {}
        _ => return Err(CtcError::TooLargeToEnumerate { classes, steps }),
    }
    let mut total = 0.0f64;
    let mut alignment = vec![0usize; steps];
    loop {
        if collapse(&alignment) == label {
            let mut prob = 1.0;
            for (t, &c) in alignment.iter().enumerate() {
                prob *= p.prob(t, c);
            }
            total += prob;
        }
        // Odometer increment.
        let mut pos = steps;
        loop {
            if pos == 0 {
                return Ok(total.ln());
            }
            pos -= 1;
            alignment[pos] += 1;
            if alignment[pos] < classes {
                break;
            }
            alignment[pos] = 0;
        }
    }
}

/// All label sequences of length 0..=steps over `alphabet_len` labels.
/// Oracle helper for normalization checks; callers filter by
/// `required_steps` for exact reachability.
pub fn enumerate_transcriptions(alphabet_len: usize, steps: usize) -> Vec<Vec<usize>> {
    let mut all = vec![vec![]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..steps {
        let mut next = Vec::new();
        for prefix in &frontier {
            for l in 0..alphabet_len {
                let mut ext = prefix.clone();
                ext.push(l);
                next.push(ext);
            }
        }
        all.extend(next.iter().cloned());
        frontier = next;
    }
    all
}

/// Negative log-likelihood of `label` and its gradient with respect to
/// pre-softmax logits, from forward-backward posteriors.
pub fn ctc_gradient(
    logits: ArrayView2<f64>,
    label: &[usize],
) -> Result<(f64, Array2<f64>), CtcError> {
    let classes = logits.ncols();
    if classes == 0 {
        return Err(CtcError::NoClasses);
    }
    check_label(label, classes - 1)?;
    let steps = logits.nrows();
    let needed = required_steps(label);
    if needed > steps {
        return Err(CtcError::Infeasible { needed, steps });
    }

    // Row-wise log-softmax.
    let mut log_probs = logits.to_owned();
    for mut row in log_probs.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }

    let ext = extended_label(label);
    let s = ext.len();
    let lp = |t: usize, class: usize| log_probs[(t, class)];

    // alpha[t][i]: log prob of consuming frames 0..=t and sitting at
    // extended position i (emission at t included).
    let mut alpha = Array2::from_elem((steps, s), f64::NEG_INFINITY);
    alpha[(0, 0)] = lp(0, ext[0]);
    if s > 1 {
        alpha[(0, 1)] = lp(0, ext[1]);
    }
    for t in 1..steps {
        for i in 0..s {
            let mut acc = alpha[(t - 1, i)];
            if i >= 1 {
                acc = logsumexp2(acc, alpha[(t - 1, i - 1)]);
            }
            if i >= 2 && ext[i] != BLANK && ext[i] != ext[i - 2] {
                acc = logsumexp2(acc, alpha[(t - 1, i - 2)]);
            }
            alpha[(t, i)] = acc + lp(t, ext[i]);
        }
    }

    // beta[t][i]: log prob of completing from position i after frame t
    // (emission at t excluded), so alpha + beta marginalizes to the
    // total at every t.
    let mut beta = Array2::from_elem((steps, s), f64::NEG_INFINITY);
    beta[(steps - 1, s - 1)] = 0.0;
    if s > 1 {
        beta[(steps - 1, s - 2)] = 0.0;
    }
    for t in (0..steps - 1).rev() {
        for i in 0..s {
            let mut acc = beta[(t + 1, i)] + lp(t + 1, ext[i]);
            if i + 1 < s {
                acc = logsumexp2(acc, beta[(t + 1, i + 1)] + lp(t + 1, ext[i + 1]));
            }
            if i + 2 < s && ext[i + 2] != BLANK && ext[i + 2] != ext[i] {
                acc = logsumexp2(acc, beta[(t + 1, i + 2)] + lp(t + 1, ext[i + 2]));
            }
            beta[(t, i)] = acc;
        }
    }

    let total = if s >= 2 {
        logsumexp2(alpha[(steps - 1, s - 1)], alpha[(steps - 1, s - 2)])
    } else {
        alpha[(steps - 1, s - 1)]
    };
    if total == f64::NEG_INFINITY {
        return Err(CtcError::Infeasible { needed, steps });
    }

    // Gradient: softmax minus label posterior.
    let mut grad = Array2::zeros((steps, classes));
    for t in 0..steps {
        let mut class_post = vec![f64::NEG_INFINITY; classes];
        for i in 0..s {
            let joint = alpha[(t, i)] + beta[(t, i)];
            class_post[ext[i]] = logsumexp2(class_post[ext[i]], joint);
        }
        for c in 0..classes {
            let posterior = (class_post[c] - total).exp();
            grad[(t, c)] = lp(t, c).exp() - posterior;
        }
    }
    Ok((-total, grad))
}

/// Greedy decode: per-frame argmax (ties to the lowest class index,
/// blank first), then collapse.
pub fn best_path_decode(p: &ProbSequence) -> Vec<usize> {
    let mut alignment = Vec::with_capacity(p.steps());
    for row in p.rows().outer_iter() {
        let mut best = 0usize;
        let mut best_v = row[0];
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > best_v {
                best = c;
                best_v = v;
            }
        }
        alignment.push(best);
    }
    collapse(&alignment)
}

/// Language model hook for beam fusion: natural-log probability of the
/// next label given the already emitted prefix (alphabet indices).
pub trait LmScore {
    fn logprob(&self, context: &[usize], next: usize) -> f64;
}

/// Prefix beam search settings. The candidate score is
/// `log p_ctc + alpha * log p_lm + beta * |prefix|`; the language
/// model contributes only at symbol emissions, never for blanks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamParams {
    pub width: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for BeamParams {
    fn default() -> Self {
        Self { width: 16, alpha: 1.0, beta: 0.0 }
    }
}

#[derive(Clone)]
struct BeamHyp {
    log_blank: f64,
    log_label: f64,
    lm: f64,
}

impl BeamHyp {
    fn total(&self) -> f64 {
        logsumexp2(self.log_blank, self.log_label)
    }

    fn score(&self, params: &BeamParams, len: usize) -> f64 {
        self.total() + params.alpha * self.lm + params.beta * len as f64
    }
}

/// Standard prefix beam search over blank/non-blank mass with optional
/// shallow n-gram fusion. Deterministic: score ties break toward the
/// lexicographically smaller prefix.
pub fn prefix_beam_decode(
    p: &ProbSequence,
    params: &BeamParams,
    lm: Option<&dyn LmScore>,
) -> Result<Vec<usize>, CtcError> {
    if params.width == 0 {
        return Err(CtcError::ZeroBeam);
    }
    let classes = p.classes();
    let mut beams: Vec<(Vec<usize>, BeamHyp)> = vec![(
        Vec::new(),
        BeamHyp { log_blank: 0.0, log_label: f64::NEG_INFINITY, lm: 0.0 },
    )];
    for t in 0..p.steps() {
        let mut next: HashMap<Vec<usize>, BeamHyp> = HashMap::new();
        let lp_blank = p.prob(t, BLANK).ln();
        for (prefix, hyp) in &beams {
            // Blank keeps the prefix.
            let entry = next.entry(prefix.clone()).or_insert(BeamHyp {
                log_blank: f64::NEG_INFINITY,
                log_label: f64::NEG_INFINITY,
                lm: hyp.lm,
            });
            entry.log_blank = logsumexp2(entry.log_blank, hyp.total() + lp_blank);
            for class in 1..classes {
                let label = class - 1;
                let lp = p.prob(t, class).ln();
                if prefix.last() == Some(&label) {
                    // Repeat without a separating blank collapses.
                    let entry = next.entry(prefix.clone()).or_insert(BeamHyp {
                        log_blank: f64::NEG_INFINITY,
                        log_label: f64::NEG_INFINITY,
                        lm: hyp.lm,
                    });
                    entry.log_label = logsumexp2(entry.log_label, hyp.log_label + lp);
                    // Emission after a blank extends the prefix.
                    let mut extended = prefix.clone();
                    extended.push(label);
                    let lm_add = lm.map_or(0.0, |m| m.logprob(prefix, label));
                    let entry = next.entry(extended).or_insert(BeamHyp {
                        log_blank: f64::NEG_INFINITY,
                        log_label: f64::NEG_INFINITY,
                        lm: hyp.lm + lm_add,
                    });
                    entry.log_label = logsumexp2(entry.log_label, hyp.log_blank + lp);
                } else {
                    let mut extended = prefix.clone();
                    extended.push(label);
                    let lm_add = lm.map_or(0.0, |m| m.logprob(prefix, label));
                    let entry = next.entry(extended).or_insert(BeamHyp {
                        log_blank: f64::NEG_INFINITY,
                        log_label: f64::NEG_INFINITY,
                        lm: hyp.lm + lm_add,
                    });
                    entry.log_label = logsumexp2(entry.log_label, hyp.total() + lp);
                }
            }
        }
        let mut ranked: Vec<(Vec<usize>, BeamHyp)> = next.into_iter().collect();
        ranked.sort_by(|a, b| {
            let sa = a.1.score(params, a.0.len());
            let sb = b.1.score(params, b.0.len());
            sb.partial_cmp(&sa)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(params.width);
        beams = ranked;
    }
    Ok(beams
        .into_iter()
        .min_by(|a, b| {
            let sa = a.1.score(params, a.0.len());
            let sb = b.1.score(params, b.0.len());
            sb.partial_cmp(&sa)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        })
        .map(|(prefix, _)| prefix)
        .unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_rows(steps: usize, classes: usize) -> ProbSequence {
        ProbSequence::new(Array2::from_elem((steps, classes), 1.0 / classes as f64)).unwrap()
    }

    fn random_prob_sequence(rng: &mut ChaCha8Rng, steps: usize, classes: usize) -> ProbSequence {
        let mut rows = Array2::zeros((steps, classes));
        for mut row in rows.outer_iter_mut() {
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = rng.random_range(0.01..1.0);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        ProbSequence::new(rows).unwrap()
    }

    /// One-hot rows spelling an alignment.
    fn one_hot(alignment: &[usize], classes: usize) -> ProbSequence {
        let mut rows = Array2::zeros((alignment.len(), classes));
        for (t, &c) in alignment.iter().enumerate() {
            rows[(t, c)] = 1.0;
        }
        ProbSequence::new(rows).unwrap()
    }

    #[test]
    fn collapse_examples() {
        // "_tt_r_ee_e" with t=1, r=2, e=3 in extended space.
        let alignment = [0, 1, 1, 0, 2, 0, 3, 3, 0, 3];
        assert_eq!(collapse(&alignment), vec![0, 1, 2, 2]); // t r e e
        assert_eq!(collapse(&[0, 0, 0]), Vec::<usize>::new());
        // "aa_a" -> "aa"
        assert_eq!(collapse(&[1, 1, 0, 1]), vec![0, 0]);
    }

    #[test]
    fn collapse_idempotent_on_clean_strings() {
        // A blank-free, repeat-free alignment maps to itself (shifted
        // down one index); collapsing the re-encoded output is stable.
        let alignment = [1usize, 2, 3, 2];
        let once = collapse(&alignment);
        let reencoded: Vec<usize> = once.iter().map(|&l| l + 1).collect();
        assert_eq!(collapse(&reencoded), once);
    }

    #[test]
    fn two_step_uniform_matches_hand_enumeration() {
        // T=2, one label + blank, all rows (0.5, 0.5): alignments are
        // bb, ba, ab, aa -> p("a") = 0.75, p("") = 0.25, p("aa") = 0.
        let p = uniform_rows(2, 2);
        let a = transcription_logprob(&p, &[0]).unwrap();
        assert!((a.exp() - 0.75).abs() < 1e-12);
        let empty = transcription_logprob(&p, &[]).unwrap();
        assert!((empty.exp() - 0.25).abs() < 1e-12);
        let aa = transcription_logprob(&p, &[0, 0]).unwrap();
        assert_eq!(aa, f64::NEG_INFINITY);
        // Brute force agrees.
        let bf = brute_force_logprob(&p, &[0]).unwrap();
        assert!((a - bf).abs() < 1e-12);
        let bf_empty = brute_force_logprob(&p, &[]).unwrap();
        assert!((empty - bf_empty).abs() < 1e-12);
    }

    #[test]
    fn one_step_probability_is_row_entry() {
        let p = ProbSequence::new(array![[0.2, 0.5, 0.3]]).unwrap();
        let lp = brute_force_logprob(&p, &[0]).unwrap();
        assert!((lp.exp() - 0.5).abs() < 1e-12);
        let lp1 = transcription_logprob(&p, &[1]).unwrap();
        assert!((lp1.exp() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn oracle_equivalence_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..30 {
            let steps = rng.random_range(1..=5);
            let classes = rng.random_range(2..=4);
            let p = random_prob_sequence(&mut rng, steps, classes);
            let label_len = rng.random_range(0..=steps.min(3));
            let label: Vec<usize> =
                (0..label_len).map(|_| rng.random_range(0..classes - 1)).collect();
            let fast = transcription_logprob(&p, &label).unwrap();
            let slow = brute_force_logprob(&p, &label).unwrap();
            if fast == f64::NEG_INFINITY {
                assert_eq!(slow, f64::NEG_INFINITY);
            } else {
                assert!((fast - slow).abs() <= 1e-10, "{fast} vs {slow}");
            }
        }
    }

    #[test]
    fn total_probability_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let p = random_prob_sequence(&mut rng, 4, 3);
        let mut total = 0.0;
        for label in enumerate_transcriptions(2, 4) {
            if required_steps(&label) > 4 {
                continue;
            }
            total += transcription_logprob(&p, &label).unwrap().exp();
        }
        assert!((total - 1.0).abs() <= 1e-8, "total {total}");
    }

    #[test]
    fn brute_force_guard() {
        let p = uniform_rows(30, 4);
        assert!(matches!(
            brute_force_logprob(&p, &[0]),
            Err(CtcError::TooLargeToEnumerate { .. })
        ));
    }

    #[test]
    fn stability_with_tiny_probabilities() {
        let mut rows = Array2::from_elem((6, 3), 1e-30);
        for t in 0..6 {
            rows[(t, 0)] = 1.0 - 2e-30;
        }
        let p = ProbSequence::new(rows).unwrap();
        let lp = transcription_logprob(&p, &[0, 1]).unwrap();
        assert!(lp.is_finite() || lp == f64::NEG_INFINITY);
        assert!(!lp.is_nan());
        let (loss, grad) = ctc_gradient(p.rows().mapv(f64::ln).view(), &[0, 1]).unwrap();
        assert!(loss.is_finite());
        assert!(grad.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let steps = 5;
        let classes = 4;
        let mut logits = Array2::zeros((steps, classes));
        for v in logits.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let label = vec![0usize, 2, 0];
        let (_, grad) = ctc_gradient(logits.view(), &label).unwrap();
        let eps = 1e-5;
        let mut max_rel = 0.0f64;
        for t in 0..steps {
            for c in 0..classes {
                let mut plus = logits.clone();
                plus[(t, c)] += eps;
                let mut minus = logits.clone();
                minus[(t, c)] -= eps;
                let (lp, _) = ctc_gradient(plus.view(), &label).unwrap();
                let (lm, _) = ctc_gradient(minus.view(), &label).unwrap();
                let numeric = (lp - lm) / (2.0 * eps);
                let denom = numeric.abs().max(grad[(t, c)].abs()).max(1e-8);
                max_rel = max_rel.max((numeric - grad[(t, c)]).abs() / denom);
            }
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut logits = Array2::zeros((5, 3));
        for v in logits.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let (_, grad) = ctc_gradient(logits.view(), &[1, 0]).unwrap();
        for row in grad.outer_iter() {
            assert!(row.sum().abs() <= 1e-9);
        }
    }

    #[test]
    fn loss_invariant_to_per_row_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let mut logits = Array2::zeros((4, 3));
        for v in logits.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let label = vec![0usize, 1];
        let (base, _) = ctc_gradient(logits.view(), &label).unwrap();
        let mut shifted = logits.clone();
        for mut row in shifted.outer_iter_mut() {
            for v in row.iter_mut() {
                *v += 7.5;
            }
        }
        let (moved, _) = ctc_gradient(shifted.view(), &label).unwrap();
        assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn infeasible_label_is_gradient_error() {
        let logits = Array2::zeros((2, 3));
        assert!(matches!(
            ctc_gradient(logits.view(), &[0, 0]),
            Err(CtcError::Infeasible { needed: 3, steps: 2 })
        ));
    }

    #[test]
    fn greedy_decode_examples() {
        // One-hot rows spelling "_a_b".
        let p = one_hot(&[0, 1, 0, 2], 3);
        assert_eq!(best_path_decode(&p), vec![0, 1]);
        // Uniform rows tie-break to blank, collapsing to empty.
        let p = uniform_rows(2, 2);
        assert_eq!(best_path_decode(&p), Vec::<usize>::new());
    }

    #[test]
    fn beam_width_one_equals_greedy_on_peaked_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let steps = rng.random_range(2..7);
            let alignment: Vec<usize> = (0..steps).map(|_| rng.random_range(0..3)).collect();
            // Peaked: 0.9 mass on the alignment class.
            let mut rows = Array2::from_elem((steps, 3), 0.05);
            for (t, &c) in alignment.iter().enumerate() {
                rows[(t, c)] = 0.9;
            }
            let p = ProbSequence::new(rows).unwrap();
            let params = BeamParams { width: 1, alpha: 0.0, beta: 0.0 };
            assert_eq!(prefix_beam_decode(&p, &params, None).unwrap(), best_path_decode(&p));
        }
    }

    #[test]
    fn large_beam_matches_brute_force_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..10 {
            let steps = rng.random_range(2..=4);
            let p = random_prob_sequence(&mut rng, steps, 3);
            let params = BeamParams { width: 256, alpha: 0.0, beta: 0.0 };
            let decoded = prefix_beam_decode(&p, &params, None).unwrap();
            // Oracle: brute-force probability over all transcriptions.
            let mut best: (Vec<usize>, f64) = (vec![], f64::NEG_INFINITY);
            for label in enumerate_transcriptions(2, steps) {
                if required_steps(&label) > steps {
                    continue;
                }
                let lp = brute_force_logprob(&p, &label).unwrap();
                if lp > best.1 {
                    best = (label, lp);
                }
            }
            let decoded_lp = brute_force_logprob(&p, &decoded).unwrap();
            assert!(
                (decoded_lp - best.1).abs() < 1e-10,
                "beam {decoded:?} ({decoded_lp}) vs oracle {:?} ({})",
                best.0,
                best.1
            );
        }
    }

    struct ForcedBigram;

    impl LmScore for ForcedBigram {
        fn logprob(&self, context: &[usize], next: usize) -> f64 {
            // After label 0, label 1 is near-certain.
            if context.last() == Some(&0) {
                if next == 1 {
                    return (0.95f64).ln();
                }
                return (0.0125f64).ln();
            }
            (0.2f64).ln()
        }
    }

    #[test]
    fn lm_fusion_flips_ambiguous_decode() {
        // Frames: clear "a", then an ambiguous frame slightly
        // preferring "e" over "b". Without the language model the
        // decode is "ae"; with the forced bigram it is "ab".
        // Classes: blank, a(0), b(1), c(2), d(3), e(4).
        let rows = array![
            [0.01, 0.94, 0.01, 0.01, 0.01, 0.02],
            [0.01, 0.01, 0.46, 0.01, 0.01, 0.50],
        ];
        let p = ProbSequence::new(rows).unwrap();
        let raw = prefix_beam_decode(&p, &BeamParams { width: 8, alpha: 0.0, beta: 0.0 }, None)
            .unwrap();
        assert_eq!(raw, vec![0, 4]); // "ae"
        let fused = prefix_beam_decode(
            &p,
            &BeamParams { width: 8, alpha: 1.0, beta: 0.0 },
            Some(&ForcedBigram),
        )
        .unwrap();
        assert_eq!(fused, vec![0, 1]); // "ab"
    }

    #[test]
    fn alphabet_basics() {
        let a = Alphabet::from_chars("abc".chars()).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a.classes_with_blank(), 4);
        assert_eq!(a.encode_text("cab").unwrap(), vec![2, 0, 1]);
        assert_eq!(a.decode_to_text(&[2, 0, 1]), "cab");
        assert!(matches!(a.encode_text("xyz"), Err(CtcError::UnknownLabel(_))));
        assert!(Alphabet::from_chars("aa".chars()).is_err());
        assert!(Alphabet::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn prob_sequence_validation() {
        assert!(ProbSequence::new(array![[0.5, 0.6]]).is_err());
        assert!(ProbSequence::new(array![[1.1, -0.1]]).is_err());
        assert!(ProbSequence::new(array![[0.25, 0.75]]).is_ok());
        let logits = array![[0.0, 0.0, 0.0]];
        let p = ProbSequence::from_logits(logits.view());
        for &v in p.rows().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }
}
