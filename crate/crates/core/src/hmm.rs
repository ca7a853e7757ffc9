//! Discrete-observation hidden Markov models.
//!
//! Likelihoods use the scaled forward recursion (per-step normalization);
//! the backward pass reuses the forward scale factors. Log-likelihoods are
//! natural logarithms.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{child_seed, rng_from, Rng};

pub const STOCHASTIC_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Hmm {
    n_states: usize,
    n_symbols: usize,
    initial: Vec<f64>,
    transition: Vec<f64>,
    emission: Vec<f64>,
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOLERANCE {
        return Err(Error::invalid(format!("{what} sums to {sum}")));
    }
    Ok(())
}

impl Hmm {
    pub fn new(initial: Vec<f64>, transition: Vec<Vec<f64>>, emission: Vec<Vec<f64>>) -> Result<Self> {
        let s = initial.len();
        if s == 0 {
            return Err(Error::invalid("model needs at least one state"));
        }
        if transition.len() != s || emission.len() != s {
            return Err(Error::invalid("transition and emission need one row per state"));
        }
        let m = emission[0].len();
        if m == 0 {
            return Err(Error::invalid("model needs at least one symbol"));
        }
        if transition.iter().any(|r| r.len() != s) || emission.iter().any(|r| r.len() != m) {
            return Err(Error::invalid("ragged model rows"));
        }
        Self::from_flat(
            initial,
            transition.into_iter().flatten().collect(),
            emission.into_iter().flatten().collect(),
            m,
        )
    }

    /// Row-major transition (S x S) and emission (S x M) matrices.
    pub fn from_flat(
        initial: Vec<f64>,
        transition: Vec<f64>,
        emission: Vec<f64>,
        n_symbols: usize,
    ) -> Result<Self> {
        let s = initial.len();
        if s == 0 || n_symbols == 0 {
            return Err(Error::invalid("model needs at least one state and one symbol"));
        }
        if transition.len() != s * s || emission.len() != s * n_symbols {
            return Err(Error::invalid("model matrices have the wrong shape"));
        }
        check_distribution(&initial, "initial distribution")?;
        for (i, row) in transition.chunks(s).enumerate() {
            check_distribution(row, &format!("transition row {i}"))?;
        }
        for (i, row) in emission.chunks(n_symbols).enumerate() {
            check_distribution(row, &format!("emission row {i}"))?;
        }
        Ok(Hmm {
            n_states: s,
            n_symbols,
            initial,
            transition,
            emission,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_symbols(&self) -> usize {
        self.n_symbols
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.transition[from * self.n_states + to]
    }

    pub fn transition_row(&self, from: usize) -> &[f64] {
        &self.transition[from * self.n_states..(from + 1) * self.n_states]
    }

    pub fn emission(&self, state: usize, symbol: usize) -> f64 {
        self.emission[state * self.n_symbols + symbol]
    }

    pub fn emission_row(&self, state: usize) -> &[f64] {
        &self.emission[state * self.n_symbols..(state + 1) * self.n_symbols]
    }

    /// The same model with states reordered: new state `i` is old state `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Hmm> {
        let s = self.n_states;
        let mut seen = vec![false; s];
        if order.len() != s || order.iter().any(|&o| o >= s || std::mem::replace(&mut seen[o], true)) {
            return Err(Error::invalid("not a permutation of the states"));
        }
        let initial = order.iter().map(|&o| self.initial[o]).collect();
        let transition = order
            .iter()
            .flat_map(|&a| order.iter().map(move |&b| (a, b)))
            .map(|(a, b)| self.transition(a, b))
            .collect();
        let emission = order
            .iter()
            .flat_map(|&a| self.emission_row(a).iter().copied())
            .collect();
        Hmm::from_flat(initial, transition, emission, self.n_symbols)
    }

    fn check_symbols(&self, seq: &[usize]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::invalid("empty sequence"));
        }
        match seq.iter().find(|&&o| o >= self.n_symbols) {
            Some(&symbol) => Err(Error::SymbolOutOfRange {
                symbol,
                n_symbols: self.n_symbols,
            }),
            None => Ok(()),
        }
    }

    /// Scaled forward and backward passes over one sequence.
    pub fn forward_backward(&self, seq: &[usize]) -> Result<ForwardBackward> {
        self.check_symbols(seq)?;
        let s = self.n_states;
        let t_len = seq.len();
        let mut alpha = vec![0.0; t_len * s];
        let mut scale = vec![0.0; t_len];
        let mut log_likelihood = 0.0;

        for t in 0..t_len {
            let o = seq[t];
            let (done, rest) = alpha.split_at_mut(t * s);
            let cur = &mut rest[..s];
            if t == 0 {
                cur.copy_from_slice(&self.initial);
            } else {
                let prev = &done[(t - 1) * s..];
                for (i, &a) in prev.iter().enumerate() {
                    if a != 0.0 {
                        let row = &self.transition[i * s..(i + 1) * s];
                        for (x, &p) in cur.iter_mut().zip(row) {
                            *x += a * p;
                        }
                    }
                }
            }
            let mut c = 0.0;
            for (j, x) in cur.iter_mut().enumerate() {
                *x *= self.emission[j * self.n_symbols + o];
                c += *x;
            }
            scale[t] = c;
            if c == 0.0 {
                return Ok(ForwardBackward {
                    n_states: s,
                    alpha,
                    beta: vec![0.0; t_len * s],
                    scale,
                    log_likelihood: f64::NEG_INFINITY,
                });
            }
            for x in cur.iter_mut() {
                *x /= c;
            }
            log_likelihood += c.ln();
        }

        let mut beta = vec![0.0; t_len * s];
        for b in &mut beta[(t_len - 1) * s..] {
            *b = 1.0;
        }
        let mut weighted = vec![0.0; s];
        for t in (0..t_len - 1).rev() {
            self.weighted_beta(seq[t + 1], &beta[(t + 1) * s..(t + 2) * s], scale[t + 1], &mut weighted);
            for i in 0..s {
                let row = &self.transition[i * s..(i + 1) * s];
                beta[t * s + i] = row.iter().zip(&weighted).map(|(a, w)| a * w).sum();
            }
        }
        Ok(ForwardBackward {
            n_states: s,
            alpha,
            beta,
            scale,
            log_likelihood,
        })
    }

    /// `B_j(o) * beta_j / c` for every state `j`.
    fn weighted_beta(&self, o: usize, beta_next: &[f64], c: f64, out: &mut [f64]) {
        for (j, w) in out.iter_mut().enumerate() {
            *w = self.emission[j * self.n_symbols + o] * beta_next[j] / c;
        }
    }

    /// `log P(seq | model)`; `-inf` for impossible sequences.
    pub fn log_likelihood(&self, seq: &[usize]) -> Result<f64> {
        self.check_symbols(seq)?;
        let s = self.n_states;
        let mut cur: Vec<f64> = (0..s)
            .map(|j| self.initial[j] * self.emission[j * self.n_symbols + seq[0]])
            .collect();
        let mut next = vec![0.0; s];
        let mut ll = 0.0;
        for (t, &o) in seq.iter().enumerate() {
            if t > 0 {
                for j in 0..s {
                    let mut acc = 0.0;
                    for i in 0..s {
                        acc += cur[i] * self.transition[i * s + j];
                    }
                    next[j] = acc * self.emission[j * self.n_symbols + o];
                }
                std::mem::swap(&mut cur, &mut next);
            }
            let c: f64 = cur.iter().sum();
            if c == 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            cur.iter_mut().for_each(|a| *a /= c);
            ll += c.ln();
        }
        Ok(ll)
    }

    /// Total log-likelihood of every sequence in the set.
    pub fn total_log_likelihood(&self, data: &SymbolSequenceSet) -> Result<f64> {
        data.sequences
            .iter()
            .map(|seq| self.log_likelihood(seq))
            .sum()
    }

    /// Most probable state path and its log-probability. Ties go to the
    /// lower state id.
    pub fn viterbi(&self, seq: &[usize]) -> Result<(Vec<usize>, f64)> {
        self.check_symbols(seq)?;
        let s = self.n_states;
        let ln = |p: f64| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
        let log_a: Vec<f64> = self.transition.iter().map(|&p| ln(p)).collect();
        let mut delta: Vec<f64> = (0..s)
            .map(|j| ln(self.initial[j]) + ln(self.emission[j * self.n_symbols + seq[0]]))
            .collect();
        let mut back = vec![0usize; seq.len() * s];
        let mut next = vec![0.0; s];
        for (t, &o) in seq.iter().enumerate().skip(1) {
            for j in 0..s {
                let mut best = 0;
                let mut best_score = delta[0] + log_a[j];
                for i in 1..s {
                    let score = delta[i] + log_a[i * s + j];
                    if score > best_score {
                        best = i;
                        best_score = score;
                    }
                }
                back[t * s + j] = best;
                next[j] = best_score + ln(self.emission[j * self.n_symbols + o]);
            }
            std::mem::swap(&mut delta, &mut next);
        }
        let mut last = 0;
        for j in 1..s {
            if delta[j] > delta[last] {
                last = j;
            }
        }
        let score = delta[last];
        let mut path = vec![0; seq.len()];
        path[seq.len() - 1] = last;
        for t in (1..seq.len()).rev() {
            path[t - 1] = back[t * s + path[t]];
        }
        Ok((path, score))
    }

    /// Plain-text model file: `hmm S M`, then the initial row, the S
    /// transition rows and the S emission rows, at round-trip precision.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        let row = |xs: &[f64]| {
            let mut line = String::new();
            for (i, x) in xs.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{x:?}");
            }
            line
        };
        writeln!(out, "hmm {} {}", self.n_states, self.n_symbols)?;
        writeln!(out, "initial")?;
        writeln!(out, "{}", row(&self.initial))?;
        writeln!(out, "transition")?;
        for i in 0..self.n_states {
            writeln!(out, "{}", row(self.transition_row(i)))?;
        }
        writeln!(out, "emission")?;
        for i in 0..self.n_states {
            writeln!(out, "{}", row(self.emission_row(i)))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: R) -> Result<Self> {
        let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
        let bad = |line: usize, reason: &str| Error::Parse {
            line,
            reason: reason.to_string(),
        };
        let head: Vec<&str> = lines.first().map(|l| l.split(' ').collect()).unwrap_or_default();
        if head.len() != 3 || head[0] != "hmm" {
            return Err(bad(1, "expected `hmm S M`"));
        }
        let s: usize = head[1].parse().map_err(|_| bad(1, "bad state count"))?;
        let m: usize = head[2].parse().map_err(|_| bad(1, "bad symbol count"))?;
        let expected = 1 + 1 + 1 + 1 + s + 1 + s;
        if lines.len() < expected {
            return Err(bad(lines.len(), "truncated model file"));
        }
        let parse_row = |idx: usize, width: usize| -> Result<Vec<f64>> {
            let row: Vec<f64> = lines[idx]
                .split(' ')
                .map(|x| x.parse::<f64>().map_err(|_| bad(idx + 1, "bad number")))
                .collect::<Result<_>>()?;
            if row.len() != width {
                return Err(bad(idx + 1, "wrong row width"));
            }
            Ok(row)
        };
        for (idx, name) in [(1, "initial"), (3, "transition"), (4 + s, "emission")] {
            if lines[idx] != name {
                return Err(bad(idx + 1, &format!("expected `{name}`")));
            }
        }
        let initial = parse_row(2, s)?;
        let mut transition = Vec::with_capacity(s * s);
        for i in 0..s {
            transition.extend(parse_row(4 + i, s)?);
        }
        let mut emission = Vec::with_capacity(s * m);
        for i in 0..s {
            emission.extend(parse_row(5 + s + i, m)?);
        }
        Hmm::from_flat(initial, transition, emission, m)
    }
}

/// Scaled forward/backward variables for one sequence. `alpha` rows sum to
/// one; `beta` is scaled by the same factors, so `alpha_t . beta_t = 1` at
/// every position.
#[derive(Debug, Clone)]
pub struct ForwardBackward {
    n_states: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub scale: Vec<f64>,
    pub log_likelihood: f64,
}

impl ForwardBackward {
    /// Posterior state marginals at position `t`.
    pub fn gamma(&self, t: usize) -> Vec<f64> {
        let s = self.n_states;
        (0..s)
            .map(|i| self.alpha[t * s + i] * self.beta[t * s + i])
            .collect()
    }

    /// Total log-likelihood recovered from the forward and backward
    /// variables at position `t`.
    pub fn slice_log_likelihood(&self, t: usize) -> f64 {
        let dot: f64 = self.gamma(t).iter().sum();
        dot.ln() + self.scale.iter().map(|c| c.ln()).sum::<f64>()
    }
}

/// Sequences over a labelled alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolSequenceSet {
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<String>,
}

impl SymbolSequenceSet {
    pub fn new(sequences: Vec<Vec<usize>>, labels: Vec<String>) -> Result<Self> {
        if sequences.iter().any(Vec::is_empty) {
            return Err(Error::invalid("sequences must be non-empty"));
        }
        if let Some(&symbol) = sequences.iter().flatten().find(|&&o| o >= labels.len()) {
            return Err(Error::SymbolOutOfRange {
                symbol,
                n_symbols: labels.len(),
            });
        }
        Ok(SymbolSequenceSet { sequences, labels })
    }

    /// Alphabet labelled `0..n_symbols`.
    pub fn unlabelled(sequences: Vec<Vec<usize>>, n_symbols: usize) -> Result<Self> {
        Self::new(sequences, (0..n_symbols).map(|i| i.to_string()).collect())
    }

    pub fn n_symbols(&self) -> usize {
        self.labels.len()
    }

    pub fn total_symbols(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Which parameters may be non-zero. Disallowed entries are structural
/// zeros: initialized to zero, kept at zero by EM, and excluded from the
/// free-parameter count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Structure {
    pub n_states: usize,
    pub n_symbols: usize,
    pub initial: Vec<bool>,
    pub transition: Vec<bool>,
    pub emission: Vec<bool>,
}

impl Structure {
    pub fn free(n_states: usize, n_symbols: usize) -> Self {
        Structure {
            n_states,
            n_symbols,
            initial: vec![true; n_states],
            transition: vec![true; n_states * n_states],
            emission: vec![true; n_states * n_symbols],
        }
    }

    /// Each row with `a` allowed entries contributes `a - 1` parameters.
    pub fn free_parameters(&self) -> usize {
        let row = |r: &[bool]| r.iter().filter(|&&b| b).count().saturating_sub(1);
        row(&self.initial)
            + self.transition.chunks(self.n_states).map(row).sum::<usize>()
            + self.emission.chunks(self.n_symbols).map(row).sum::<usize>()
    }

    fn validate(&self) -> Result<()> {
        let s = self.n_states;
        if self.initial.len() != s
            || self.transition.len() != s * s
            || self.emission.len() != s * self.n_symbols
        {
            return Err(Error::invalid("structure masks have the wrong shape"));
        }
        let nonempty = |r: &[bool]| r.iter().any(|&b| b);
        if !nonempty(&self.initial)
            || !self.transition.chunks(s).all(nonempty)
            || !self.emission.chunks(self.n_symbols).all(nonempty)
        {
            return Err(Error::invalid("every structure row needs an allowed entry"));
        }
        Ok(())
    }
}

/// `k = S(S-1) + S(M-1) + (S-1)` for an unconstrained model.
pub fn free_parameters(n_states: usize, n_symbols: usize) -> usize {
    Structure::free(n_states, n_symbols).free_parameters()
}

/// `-2 logL + 2k` with the unconstrained parameter count.
pub fn aic(model: &Hmm, data: &SymbolSequenceSet) -> Result<f64> {
    let k = free_parameters(model.n_states(), model.n_symbols());
    Ok(aic_score(model.total_log_likelihood(data)?, k))
}

pub fn aic_score(log_likelihood: f64, free_parameters: usize) -> f64 {
    -2.0 * log_likelihood + 2.0 * free_parameters as f64
}

/// Expected consecutive emissions in `state`, `1 / (1 - a_ss)`; infinite
/// for an absorbing state.
pub fn expected_dwell(model: &Hmm, state: usize) -> f64 {
    let stay = model.transition(state, state);
    if stay >= 1.0 {
        f64::INFINITY
    } else {
        1.0 / (1.0 - stay)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub structure: Option<Structure>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-6,
            max_iter: 1000,
            structure: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: Hmm,
    pub log_likelihood: f64,
    /// Parameter updates that raised the likelihood by at least `tol`.
    pub iterations: usize,
    pub converged: bool,
    /// Total log-likelihood before each update, ending with the final model's.
    pub history: Vec<f64>,
    pub free_parameters: usize,
}

fn dirichlet_row(rng: &mut Rng, allowed: &[bool]) -> Vec<f64> {
    let mut row: Vec<f64> = allowed
        .iter()
        .map(|&ok| if ok { -(1.0 - rng.random::<f64>()).ln() } else { 0.0 })
        .collect();
    let sum: f64 = row.iter().sum();
    if sum > 0.0 {
        row.iter_mut().for_each(|x| *x /= sum);
    } else {
        let n = allowed.iter().filter(|&&b| b).count() as f64;
        for (x, &ok) in row.iter_mut().zip(allowed) {
            *x = if ok { 1.0 / n } else { 0.0 };
        }
    }
    row
}

/// Random starting point: Dirichlet(1) rows over the allowed entries.
pub fn random_model(structure: &Structure, seed: u64) -> Result<Hmm> {
    structure.validate()?;
    let mut rng = rng_from(seed);
    let (s, m) = (structure.n_states, structure.n_symbols);
    let initial = dirichlet_row(&mut rng, &structure.initial);
    let transition = structure
        .transition
        .chunks(s)
        .flat_map(|r| dirichlet_row(&mut rng, r))
        .collect();
    let emission = structure
        .emission
        .chunks(m)
        .flat_map(|r| dirichlet_row(&mut rng, r))
        .collect();
    Hmm::from_flat(initial, transition, emission, m)
}

struct ExpectedCounts {
    initial: Vec<f64>,
    transition: Vec<f64>,
    emission: Vec<f64>,
    log_likelihood: f64,
}

fn expected_counts(model: &Hmm, data: &SymbolSequenceSet) -> Result<ExpectedCounts> {
    let (s, m) = (model.n_states, model.n_symbols);
    let mut acc = ExpectedCounts {
        initial: vec![0.0; s],
        transition: vec![0.0; s * s],
        emission: vec![0.0; s * m],
        log_likelihood: 0.0,
    };
    for (n, seq) in data.sequences.iter().enumerate() {
        let fb = model.forward_backward(seq)?;
        if fb.log_likelihood == f64::NEG_INFINITY {
            return Err(Error::invalid(format!(
                "sequence {n} has zero probability under the model structure"
            )));
        }
        acc.log_likelihood += fb.log_likelihood;
        let mut weighted = vec![0.0; s];
        for t in 0..seq.len() {
            let o = seq[t];
            for i in 0..s {
                let g = fb.alpha[t * s + i] * fb.beta[t * s + i];
                if t == 0 {
                    acc.initial[i] += g;
                }
                acc.emission[i * m + o] += g;
            }
            if t + 1 < seq.len() {
                model.weighted_beta(seq[t + 1], &fb.beta[(t + 1) * s..(t + 2) * s], fb.scale[t + 1], &mut weighted);
                for i in 0..s {
                    let a = fb.alpha[t * s + i];
                    if a == 0.0 {
                        continue;
                    }
                    let row = &model.transition[i * s..(i + 1) * s];
                    let out = &mut acc.transition[i * s..(i + 1) * s];
                    for ((x, p), w) in out.iter_mut().zip(row).zip(&weighted) {
                        *x += a * p * w;
                    }
                }
            }
        }
    }
    Ok(acc)
}

fn normalize_rows(counts: &[f64], width: usize, previous: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(counts.len());
    for (row, prev) in counts.chunks(width).zip(previous.chunks(width)) {
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            out.extend(row.iter().map(|c| c / sum));
        } else {
            out.extend_from_slice(prev);
        }
    }
    out
}

fn m_step(model: &Hmm, counts: &ExpectedCounts) -> Result<Hmm> {
    let (s, m) = (model.n_states, model.n_symbols);
    Hmm::from_flat(
        normalize_rows(&counts.initial, s, &model.initial),
        normalize_rows(&counts.transition, s, &model.transition),
        normalize_rows(&counts.emission, m, &model.emission),
        m,
    )
}

/// Runs Baum-Welch from `start` until the likelihood gain drops below `tol`
/// or `max_iter` updates have been made.
pub fn baum_welch_from(
    start: Hmm,
    data: &SymbolSequenceSet,
    options: &FitOptions,
) -> Result<FitResult> {
    if data.sequences.is_empty() {
        return Err(Error::invalid("no sequences to fit"));
    }
    if data.n_symbols() > start.n_symbols {
        return Err(Error::invalid("data alphabet is larger than the model's"));
    }
    let free = options
        .structure
        .as_ref()
        .map_or_else(|| free_parameters(start.n_states, start.n_symbols), Structure::free_parameters);
    let mut model = start;
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let counts = expected_counts(&model, data)?;
        let ll = counts.log_likelihood;
        if let Some(&prev) = history.last() {
            if ll < prev - 1e-10 * prev.abs().max(1.0) {
                return Err(Error::LikelihoodDecreased {
                    iteration: history.len(),
                    before: prev,
                    after: ll,
                });
            }
            if ll - prev < options.tol {
                history.push(ll);
                converged = true;
                break;
            }
            iterations += 1;
        }
        history.push(ll);
        if history.len() > options.max_iter {
            break;
        }
        model = m_step(&model, &counts)?;
    }
    let log_likelihood = *history.last().expect("at least one E-step");
    Ok(FitResult {
        model,
        log_likelihood,
        iterations,
        converged,
        history,
        free_parameters: free,
    })
}

/// Multi-sequence Baum-Welch from a seeded Dirichlet(1) initialization.
pub fn fit_baum_welch(
    data: &SymbolSequenceSet,
    n_states: usize,
    seed: u64,
    options: &FitOptions,
) -> Result<FitResult> {
    if n_states == 0 {
        return Err(Error::invalid("need at least one state"));
    }
    if data.sequences.is_empty() {
        return Err(Error::invalid("no sequences to fit"));
    }
    let structure = options
        .structure
        .clone()
        .unwrap_or_else(|| Structure::free(n_states, data.n_symbols()));
    if structure.n_states != n_states || structure.n_symbols != data.n_symbols() {
        return Err(Error::invalid("structure does not match the model size"));
    }
    let free = structure.free_parameters();
    if data.total_symbols() < free {
        log::warn!(
            "{} symbols for {free} free parameters with {n_states} states",
            data.total_symbols()
        );
    }
    let start = random_model(&structure, seed)?;
    baum_welch_from(start, data, options)
}

/// Best of `restarts` fits by final log-likelihood; ties keep the earliest restart.
pub fn fit_best_of(
    data: &SymbolSequenceSet,
    n_states: usize,
    restarts: usize,
    seed: u64,
    options: &FitOptions,
) -> Result<FitResult> {
    let mut best: Option<FitResult> = None;
    for r in 0..restarts.max(1) {
        let fit = fit_baum_welch(data, n_states, child_seed(seed, r as u64), options)?;
        if best.as_ref().is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AicRow {
    pub n_states: usize,
    pub log_likelihood: f64,
    pub free_parameters: usize,
    pub aic: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub best: FitResult,
    pub table: Vec<AicRow>,
}

impl Selection {
    pub fn winner(&self) -> usize {
        self.best.model.n_states()
    }

    pub fn write_table<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "n_states,log_likelihood,free_parameters,aic,iterations,converged")?;
        for r in &self.table {
            writeln!(
                out,
                "{},{:?},{},{:?},{},{}",
                r.n_states, r.log_likelihood, r.free_parameters, r.aic, r.iterations, r.converged
            )?;
        }
        Ok(())
    }
}

/// Fits every candidate state count (best of `restarts`) and keeps the
/// minimum-AIC model; ties favour the smaller model.
pub fn select_states(
    data: &SymbolSequenceSet,
    candidates: &[usize],
    restarts: usize,
    seed: u64,
    options: &FitOptions,
) -> Result<Selection> {
    select_states_with(data, candidates, restarts, seed, options, |_| None)
}

/// As [`select_states`], with a per-candidate structural constraint.
pub fn select_states_with(
    data: &SymbolSequenceSet,
    candidates: &[usize],
    restarts: usize,
    seed: u64,
    options: &FitOptions,
    structure: impl Fn(usize) -> Option<Structure>,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate state counts"));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut table = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, FitResult)> = None;
    for &s in &sorted {
        let opts = FitOptions {
            structure: structure(s),
            ..options.clone()
        };
        let fit = fit_best_of(data, s, restarts, child_seed(seed, s as u64), &opts)?;
        let score = aic_score(fit.log_likelihood, fit.free_parameters);
        table.push(AicRow {
            n_states: s,
            log_likelihood: fit.log_likelihood,
            free_parameters: fit.free_parameters,
            aic: score,
            iterations: fit.iterations,
            converged: fit.converged,
        });
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, fit));
        }
    }
    let (_, best) = best.expect("non-empty candidates");
    Ok(Selection { best, table })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthLaw {
    Fixed(usize),
    /// Stop when the chain moves into `state`; sequences are cut at `max_len`.
    Absorbing { state: usize, max_len: usize },
}

/// A sampled hidden path with its emissions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledPath {
    pub states: Vec<usize>,
    pub symbols: Vec<usize>,
}

pub(crate) fn draw(rng: &mut Rng, probs: &[f64]) -> usize {
    let u = rng.random::<f64>();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = i;
            if u < cum {
                return i;
            }
        }
    }
    last
}

/// Ancestral sampling using `rng` directly. The draw order per sequence is:
/// initial state, then for each position its symbol followed by the next
/// state.
pub fn sample_paths_with(
    model: &Hmm,
    n_sequences: usize,
    law: LengthLaw,
    rng: &mut Rng,
) -> Result<Vec<SampledPath>> {
    match law {
        LengthLaw::Fixed(0) => return Err(Error::invalid("sequence length must be positive")),
        LengthLaw::Absorbing { state, max_len } if state >= model.n_states || max_len == 0 => {
            return Err(Error::invalid("bad absorbing length law"))
        }
        _ => {}
    }
    let mut out = Vec::with_capacity(n_sequences);
    let mut truncated = 0;
    for _ in 0..n_sequences {
        let mut states = Vec::new();
        let mut symbols = Vec::new();
        let mut state = draw(rng, &model.initial);
        loop {
            states.push(state);
            symbols.push(draw(rng, model.emission_row(state)));
            match law {
                LengthLaw::Fixed(n) if symbols.len() == n => break,
                LengthLaw::Absorbing { max_len, .. } if symbols.len() == max_len => {
                    truncated += 1;
                    break;
                }
                _ => {}
            }
            state = draw(rng, model.transition_row(state));
            if let LengthLaw::Absorbing { state: absorbing, .. } = law {
                if state == absorbing {
                    break;
                }
            }
        }
        out.push(SampledPath { states, symbols });
    }
    if truncated > 0 {
        log::warn!("{truncated} sampled sequences reached the length cap before absorption");
    }
    Ok(out)
}

pub fn sample_paths(
    model: &Hmm,
    n_sequences: usize,
    law: LengthLaw,
    seed: u64,
) -> Result<Vec<SampledPath>> {
    sample_paths_with(model, n_sequences, law, &mut rng_from(seed))
}

pub fn sample_sequences(
    model: &Hmm,
    n_sequences: usize,
    law: LengthLaw,
    seed: u64,
) -> Result<SymbolSequenceSet> {
    let paths = sample_paths(model, n_sequences, law, seed)?;
    SymbolSequenceSet::unlabelled(
        paths.into_iter().map(|p| p.symbols).collect(),
        model.n_symbols,
    )
}

/// All permutations of `0..n`, in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Largest absolute parameter difference between two same-sized models,
/// minimized over relabelings of the fitted model's states.
pub fn max_parameter_error(truth: &Hmm, fitted: &Hmm) -> Result<f64> {
    if truth.n_states != fitted.n_states || truth.n_symbols != fitted.n_symbols {
        return Err(Error::invalid("models differ in size"));
    }
    let mut best = f64::INFINITY;
    for order in permutations(truth.n_states) {
        let p = fitted.permuted(&order)?;
        let err = truth
            .initial
            .iter()
            .zip(&p.initial)
            .chain(truth.transition.iter().zip(&p.transition))
            .chain(truth.emission.iter().zip(&p.emission))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        best = best.min(err);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> Hmm {
        Hmm::new(
            vec![0.6, 0.4],
            vec![vec![0.7, 0.3], vec![0.2, 0.8]],
            vec![vec![0.9, 0.1], vec![0.3, 0.7]],
        )
        .unwrap()
    }

    fn enumerate_paths(model: &Hmm, seq: &[usize]) -> Vec<(Vec<usize>, f64)> {
        let s = model.n_states();
        let mut out = Vec::new();
        let total = s.pow(seq.len() as u32);
        for code in 0..total {
            let mut path = Vec::with_capacity(seq.len());
            let mut c = code;
            for _ in 0..seq.len() {
                path.push(c % s);
                c /= s;
            }
            path.reverse();
            let mut p = model.initial()[path[0]] * model.emission(path[0], seq[0]);
            for t in 1..seq.len() {
                p *= model.transition(path[t - 1], path[t]) * model.emission(path[t], seq[t]);
            }
            out.push((path, p));
        }
        out
    }

    #[test]
    fn one_state_product() {
        let m = Hmm::new(vec![1.0], vec![vec![1.0]], vec![vec![0.3, 0.7]]).unwrap();
        assert!((m.log_likelihood(&[1, 1]).unwrap() - 0.49_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_enumeration() {
        let m = two_state();
        let seq = [0, 1, 1];
        let total: f64 = enumerate_paths(&m, &seq).iter().map(|(_, p)| p).sum();
        assert!((m.log_likelihood(&seq).unwrap() - total.ln()).abs() < 1e-12);
        let fb = m.forward_backward(&seq).unwrap();
        assert!((fb.log_likelihood - total.ln()).abs() < 1e-12);
    }

    #[test]
    fn deterministic_cycle() {
        let m = Hmm::new(
            vec![0.25, 0.75, 0.0],
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]],
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        )
        .unwrap();
        let seq = [1, 2, 0, 1, 2];
        assert!((m.log_likelihood(&seq).unwrap() - 0.75_f64.ln()).abs() < 1e-15);
        assert_eq!(m.viterbi(&seq).unwrap().0, seq.to_vec());
        let sampled = sample_paths(&m, 5, LengthLaw::Fixed(7), 3).unwrap();
        for p in sampled {
            for w in p.symbols.windows(2) {
                assert_eq!(w[1], (w[0] + 1) % 3);
            }
        }
    }

    #[test]
    fn out_of_range_symbol() {
        let m = two_state();
        assert!(matches!(
            m.log_likelihood(&[0, 2]),
            Err(Error::SymbolOutOfRange { symbol: 2, n_symbols: 2 })
        ));
        assert!(m.viterbi(&[5]).is_err());
    }

    #[test]
    fn viterbi_matches_enumeration() {
        let m = two_state();
        for code in 0..8 {
            let seq = [code & 1, (code >> 1) & 1, (code >> 2) & 1];
            let paths = enumerate_paths(&m, &seq);
            let mut best = 0;
            for (i, (_, p)) in paths.iter().enumerate() {
                if *p > paths[best].1 {
                    best = i;
                }
            }
            let (path, score) = m.viterbi(&seq).unwrap();
            assert_eq!(path, paths[best].0);
            assert!((score - paths[best].1.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn viterbi_single_state_and_ties() {
        let m = Hmm::new(vec![1.0], vec![vec![1.0]], vec![vec![0.5, 0.5]]).unwrap();
        assert_eq!(m.viterbi(&[0, 1, 1, 0]).unwrap().0, vec![0, 0, 0, 0]);
        let sym = Hmm::new(
            vec![0.5, 0.5],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        )
        .unwrap();
        assert_eq!(sym.viterbi(&[0, 1, 0]).unwrap().0, vec![0, 0, 0]);
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(free_parameters(2, 5), 11);
        assert_eq!(free_parameters(1, 2), 1);
        let m = Hmm::new(vec![1.0], vec![vec![1.0]], vec![vec![0.5, 0.5]]).unwrap();
        let data = SymbolSequenceSet::unlabelled(vec![vec![0, 1]], 2).unwrap();
        let ll = m.total_log_likelihood(&data).unwrap();
        assert!((aic(&m, &data).unwrap() - (-2.0 * ll + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn dwell() {
        let with_stay = |a: f64| {
            Hmm::new(
                vec![1.0, 0.0],
                vec![vec![a, 1.0 - a], vec![0.0, 1.0]],
                vec![vec![1.0], vec![1.0]],
            )
            .unwrap()
        };
        assert_eq!(expected_dwell(&with_stay(0.5), 0), 2.0);
        assert_eq!(expected_dwell(&with_stay(0.875), 0), 8.0);
        assert_eq!(expected_dwell(&with_stay(0.0), 0), 1.0);
        assert_eq!(expected_dwell(&with_stay(0.0), 1), f64::INFINITY);
    }

    #[test]
    fn single_state_fit_is_frequencies() {
        let data = SymbolSequenceSet::unlabelled(vec![vec![0, 1, 1, 2], vec![1, 1]], 3).unwrap();
        let fit = fit_baum_welch(&data, 1, 4, &FitOptions::default()).unwrap();
        assert_eq!(fit.iterations, 1);
        assert!(fit.converged);
        let e = fit.model.emission_row(0);
        assert!((e[0] - 1.0 / 6.0).abs() < 1e-12);
        assert!((e[1] - 4.0 / 6.0).abs() < 1e-12);
        assert!((e[2] - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn structural_zeros_survive_em() {
        let mut st = Structure::free(2, 2);
        st.transition[1] = false; // 0 -> 1 forbidden
        st.emission[3] = false; // state 1 never emits 1
        let data = SymbolSequenceSet::unlabelled(vec![vec![0, 1, 0, 0, 1], vec![1, 1, 0]], 2).unwrap();
        let opts = FitOptions {
            structure: Some(st.clone()),
            ..FitOptions::default()
        };
        let fit = fit_baum_welch(&data, 2, 9, &opts).unwrap();
        assert_eq!(fit.model.transition(0, 1), 0.0);
        assert_eq!(fit.model.emission(1, 1), 0.0);
        assert_eq!(fit.free_parameters, 1 + (0 + 1) + (1 + 0));
    }

    #[test]
    fn model_file_round_trip() {
        let m = random_model(&Structure::free(3, 4), 11).unwrap();
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        assert_eq!(Hmm::read_text(&buf[..]).unwrap(), m);
    }

    #[test]
    fn absorbing_law_mean_length() {
        let m = Hmm::new(
            vec![1.0, 0.0],
            vec![vec![0.5, 0.5], vec![0.0, 1.0]],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        )
        .unwrap();
        let paths = sample_paths(&m, 20_000, LengthLaw::Absorbing { state: 1, max_len: 1000 }, 5).unwrap();
        let mean = paths.iter().map(|p| p.symbols.len()).sum::<usize>() as f64 / paths.len() as f64;
        assert!((mean - 2.0).abs() < 0.05, "mean = {mean}");
        assert!(paths.iter().all(|p| p.states.iter().all(|&s| s == 0)));
    }

    #[test]
    fn permutation_error() {
        let m = two_state();
        let p = m.permuted(&[1, 0]).unwrap();
        assert_eq!(max_parameter_error(&m, &p).unwrap(), 0.0);
        assert_eq!(permutations(3).len(), 6);
    }

    fn arb_model(max_states: usize, max_symbols: usize) -> impl Strategy<Value = Hmm> {
        (1..=max_states, 1..=max_symbols, any::<u64>())
            .prop_map(|(s, m, seed)| random_model(&Structure::free(s, m), seed).unwrap())
    }

    fn all_sequences(m: usize, len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for _ in 0..len {
            out = out
                .into_iter()
                .flat_map(|p| (0..m).map(move |o| [p.clone(), vec![o]].concat()))
                .collect();
        }
        out
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn slices_and_posteriors_agree(model in arb_model(4, 4), seed in any::<u64>(), len in 1usize..40) {
            let seq = sample_sequences(&model, 1, LengthLaw::Fixed(len), seed).unwrap().sequences.remove(0);
            let fb = model.forward_backward(&seq).unwrap();
            let ll = model.log_likelihood(&seq).unwrap();
            prop_assert!((fb.log_likelihood - ll).abs() <= 1e-9 * ll.abs().max(1.0));
            for t in 0..seq.len() {
                let slice = fb.slice_log_likelihood(t);
                prop_assert!((slice - ll).abs() <= 1e-9 * ll.abs().max(1.0));
                let g: f64 = fb.gamma(t).iter().sum();
                prop_assert!((g - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn likelihoods_normalize(model in arb_model(3, 3), len in 1usize..=5) {
            let total: f64 = all_sequences(model.n_symbols(), len)
                .iter()
                .map(|s| model.log_likelihood(s).unwrap().exp())
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }

        #[test]
        fn viterbi_bounded_by_likelihood(model in arb_model(4, 3), seed in any::<u64>(), len in 1usize..20) {
            let seq = sample_sequences(&model, 1, LengthLaw::Fixed(len), seed).unwrap().sequences.remove(0);
            let (_, score) = model.viterbi(&seq).unwrap();
            prop_assert!(score <= model.log_likelihood(&seq).unwrap() + 1e-9);
        }

        #[test]
        fn em_never_decreases(truth in arb_model(3, 3), seed in any::<u64>(), states in 1usize..4) {
            let data = sample_sequences(&truth, 10, LengthLaw::Fixed(15), seed).unwrap();
            let opts = FitOptions { max_iter: 50, ..FitOptions::default() };
            let fit = fit_baum_welch(&data, states, seed ^ 1, &opts).unwrap();
            for w in fit.history.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-10 * w[0].abs().max(1.0));
            }
        }
    }

    #[test]
    fn delta_emission_viterbi_is_exact() {
        let m = Hmm::new(
            vec![0.5, 0.5],
            vec![vec![0.3, 0.7], vec![0.6, 0.4]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let seq = [0, 1, 1, 0];
        let (path, score) = m.viterbi(&seq).unwrap();
        assert_eq!(path, seq.to_vec());
        assert!((score - m.log_likelihood(&seq).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn one_state_fit_recovers_frequencies() {
        let truth = Hmm::new(vec![1.0], vec![vec![1.0]], vec![vec![0.2, 0.8]]).unwrap();
        let data = sample_sequences(&truth, 100, LengthLaw::Fixed(100), 42).unwrap();
        let ones = data.sequences.iter().flatten().filter(|&&o| o == 1).count() as f64;
        assert!((ones / 10_000.0 - 0.8).abs() < 0.01);
        let fit = fit_baum_welch(&data, 1, 0, &FitOptions::default()).unwrap();
        assert!((fit.model.emission(0, 1) - 0.8).abs() < 0.02);
    }

    #[test]
    fn uniform_symbols_select_one_state() {
        let truth = Hmm::new(vec![1.0], vec![vec![1.0]], vec![vec![0.5, 0.5]]).unwrap();
        let data = sample_sequences(&truth, 50, LengthLaw::Fixed(40), 8).unwrap();
        let sel = select_states(&data, &[1, 2, 3], 3, 1, &FitOptions::default()).unwrap();
        assert_eq!(sel.winner(), 1);
        assert_eq!(sel.table.len(), 3);
        let single = select_states(&data, &[4], 1, 1, &FitOptions { max_iter: 20, ..FitOptions::default() }).unwrap();
        assert_eq!(single.table.len(), 1);
        assert_eq!(single.winner(), 4);
    }

    #[test]
    fn refit_is_consistent() {
        let truth = two_state();
        let data = sample_sequences(&truth, 40, LengthLaw::Fixed(50), 17).unwrap();
        let fit = fit_best_of(&data, 2, 3, 5, &FitOptions::default()).unwrap();
        let truth_ll = truth.total_log_likelihood(&data).unwrap();
        assert!(fit.log_likelihood >= truth_ll - 1e-3 * data.total_symbols() as f64);
    }
}
