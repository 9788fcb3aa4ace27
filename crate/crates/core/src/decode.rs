//! Autoregressive generation: greedy decoding and beam search.
//!
//! Both run against anything implementing [`TokenSession`], which the model's
//! incremental [`crate::model::Session`] provides; tests drive them with
//! hand-set toy distributions and enumeration oracles.

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::model::Session;

/// One in-flight decode state: feed a token, read logits for the next slot.
/// Cloning forks the state (beam branching).
pub trait TokenSession: Clone {
    fn advance(&mut self, token: u32) -> Result<()>;
    fn next_logits(&self) -> Vec<f64>;
}

impl<F: Scalar> TokenSession for Session<'_, F> {
    fn advance(&mut self, token: u32) -> Result<()> {
        Session::advance(self, token)
    }

    fn next_logits(&self) -> Vec<f64> {
        Session::next_logits(self)
            .iter()
            .map(|&v| Scalar::to_f64(v))
            .collect()
    }
}

fn default_beam_width() -> usize {
    4
}
fn default_max_new_tokens() -> usize {
    24
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub max_new_tokens: usize,
    /// Length-normalization exponent: score = logp / len^alpha. Zero keeps
    /// raw log probability.
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: default_beam_width(),
            max_new_tokens: default_max_new_tokens(),
            length_penalty: 0.0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width < 1 || self.max_new_tokens < 1 {
            return Err(Error::InvalidConfig(format!(
                "beam_width {} and max_new_tokens {} must be at least 1",
                self.beam_width, self.max_new_tokens
            )));
        }
        if self.length_penalty < 0.0 || !self.length_penalty.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "length_penalty {} must be finite and non-negative",
                self.length_penalty
            )));
        }
        Ok(())
    }
}

/// A finished or in-flight beam. `tokens` are the generated tokens, EOS
/// included when emitted; `logp` is their total log probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub logp: f64,
    pub score: f64,
}

fn normalized_score(logp: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 || len == 0 {
        logp
    } else {
        logp / (len as f64).powf(alpha)
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|v| v - lse).collect()
}

/// Argmax decoding: feeds `prompt`, then extends token by token until EOS or
/// `max_new_tokens`. Ties break toward the lowest token id.
pub fn greedy_decode<S: TokenSession>(
    session: &mut S,
    prompt: &[u32],
    max_new_tokens: usize,
    eos: u32,
) -> Result<Vec<u32>> {
    for &t in prompt {
        session.advance(t)?;
    }
    let mut out = Vec::new();
    for _ in 0..max_new_tokens {
        let logits = session.next_logits();
        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        let tok = best as u32;
        out.push(tok);
        if tok == eos {
            break;
        }
        session.advance(tok)?;
    }
    Ok(out)
}

struct Beam<S> {
    session: Option<S>,
    tokens: Vec<u32>,
    logp: f64,
    complete: bool,
}

/// Breadth-limited max-likelihood search. Returns hypotheses sorted by
/// length-normalized score, best first; the top hypothesis is the generation
/// result. With `beam_width = 1` this reduces to greedy decoding.
pub fn beam_search<S: TokenSession>(
    session: S,
    prompt: &[u32],
    cfg: &BeamConfig,
    eos: u32,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let mut root = session;
    for &t in prompt {
        root.advance(t)?;
    }
    let alpha = cfg.length_penalty;
    let mut beams = vec![Beam { session: Some(root), tokens: Vec::new(), logp: 0.0, complete: false }];

    for _ in 0..cfg.max_new_tokens {
        if beams.iter().all(|b| b.complete) {
            break;
        }
        // (parent index, token, total logp); None token = carried-over beam
        let mut candidates: Vec<(usize, Option<u32>, f64)> = Vec::new();
        for (bi, beam) in beams.iter().enumerate() {
            if beam.complete {
                candidates.push((bi, None, beam.logp));
                continue;
            }
            let logits = beam.session.as_ref().expect("live beam has session").next_logits();
            let logps = log_softmax(&logits);
            let mut ranked: Vec<u32> = (0..logps.len() as u32).collect();
            ranked.sort_by(|&a, &b| {
                logps[b as usize]
                    .partial_cmp(&logps[a as usize])
                    .expect("finite logps")
                    .then(a.cmp(&b))
            });
            for &tok in ranked.iter().take(cfg.beam_width) {
                candidates.push((bi, Some(tok), beam.logp + logps[tok as usize]));
            }
        }
        // score candidates; completed-without-eos beams carry their length
        let scored: Vec<(f64, usize)> = candidates
            .iter()
            .enumerate()
            .map(|(ci, &(bi, tok, logp))| {
                let len = beams[bi].tokens.len() + usize::from(tok.is_some());
                (normalized_score(logp, len, alpha), ci)
            })
            .collect();
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&x, &y| {
            scored[y]
                .0
                .partial_cmp(&scored[x].0)
                .expect("finite scores")
                .then_with(|| {
                    // deterministic tie-break: parent beam, then token id
                    let (bx, tx, _) = candidates[x];
                    let (by, ty, _) = candidates[y];
                    bx.cmp(&by).then(tx.cmp(&ty))
                })
        });

        let keep: Vec<usize> = order.into_iter().take(cfg.beam_width).collect();
        let old: Vec<Beam<S>> = std::mem::take(&mut beams);
        let mut next: Vec<Beam<S>> = Vec::with_capacity(keep.len());
        for ci in keep {
            let (bi, tok, logp) = candidates[ci];
            let parent = &old[bi];
            match tok {
                None => next.push(Beam {
                    session: None,
                    tokens: parent.tokens.clone(),
                    logp,
                    complete: true,
                }),
                Some(tok) => {
                    let mut tokens = parent.tokens.clone();
                    tokens.push(tok);
                    let complete = tok == eos;
                    let session = if complete {
                        None
                    } else {
                        let mut s = parent
                            .session
                            .clone()
                            .expect("expanded beam has session");
                        s.advance(tok)?;
                        Some(s)
                    };
                    next.push(Beam { session, tokens, logp, complete });
                }
            }
        }
        beams = next;
    }

    let mut out: Vec<Hypothesis> = beams
        .into_iter()
        .map(|b| Hypothesis {
            score: normalized_score(b.logp, b.tokens.len(), alpha),
            tokens: b.tokens,
            logp: b.logp,
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Toy distribution: logits depend only on the tokens fed so far, looked
    /// up in a fixed table. Unlisted prefixes fall back to uniform.
    #[derive(Clone)]
    struct TableSession {
        vocab: usize,
        prefix: Vec<u32>,
        table: std::rc::Rc<dyn Fn(&[u32]) -> Vec<f64>>,
    }

    impl TableSession {
        fn new(vocab: usize, table: impl Fn(&[u32]) -> Vec<f64> + 'static) -> Self {
            Self { vocab, prefix: Vec::new(), table: std::rc::Rc::new(table) }
        }
    }

    impl TokenSession for TableSession {
        fn advance(&mut self, token: u32) -> Result<()> {
            assert!((token as usize) < self.vocab);
            self.prefix.push(token);
            Ok(())
        }

        fn next_logits(&self) -> Vec<f64> {
            (self.table)(&self.prefix)
        }
    }

    /// All sequences of length <= max_len (stopping at EOS), with total logp.
    fn enumerate_sequences(
        session: &TableSession,
        max_len: usize,
        eos: u32,
    ) -> Vec<(Vec<u32>, f64)> {
        fn go(
            s: &TableSession,
            eos: u32,
            left: usize,
            tokens: &mut Vec<u32>,
            logp: f64,
            out: &mut Vec<(Vec<u32>, f64)>,
        ) {
            if left == 0 {
                out.push((tokens.clone(), logp));
                return;
            }
            let logps = log_softmax(&s.next_logits());
            for tok in 0..s.vocab as u32 {
                let mut child = s.clone();
                child.advance(tok).unwrap();
                tokens.push(tok);
                let lp = logp + logps[tok as usize];
                if tok == eos {
                    out.push((tokens.clone(), lp));
                } else {
                    go(&child, eos, left - 1, tokens, lp, out);
                }
                tokens.pop();
            }
        }
        let mut out = Vec::new();
        let mut tokens = Vec::new();
        go(session, eos, max_len, &mut tokens, 0.0, &mut out);
        out
    }

    fn fixed_toy() -> TableSession {
        // vocab 3, no EOS in play (token 2 never wins but stays possible)
        TableSession::new(3, |prefix| match prefix {
            [] => vec![1.0, 0.5, -1.0],
            [0] => vec![0.2, 2.0, -0.5],
            [1] => vec![1.5, -0.3, 0.1],
            _ => vec![0.0, 0.0, 0.0],
        })
    }

    #[test]
    fn beams_match_exhaustive_enumeration_on_toy() {
        let cfg = BeamConfig { beam_width: 9, max_new_tokens: 2, length_penalty: 0.0 };
        let eos = 99; // outside vocab: nothing terminates early
        let beams = beam_search(fixed_toy(), &[], &cfg, eos).unwrap();
        let mut all = enumerate_sequences(&fixed_toy(), 2, eos);
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        assert_eq!(all.len(), 9);
        assert_eq!(beams.len(), 9);
        for (beam, (tokens, logp)) in beams.iter().zip(all.iter()) {
            assert_eq!(&beam.tokens, tokens);
            assert!((beam.logp - logp).abs() < 1e-12, "{:?}", tokens);
        }
    }

    #[test]
    fn wide_beam_recovers_global_maximum_with_eos() {
        use rand::Rng as _;
        // random tables over vocab <= 10, length <= 3; beam_width = vocab^3
        for trial in 0..20 {
            let mut r = crate::rng::seeded(500 + trial);
            let vocab = r.random_range(3..=10usize);
            let eos = 0u32;
            let mut tables = std::collections::HashMap::new();
            let mut stack = vec![Vec::<u32>::new()];
            while let Some(prefix) = stack.pop() {
                let logits: Vec<f64> =
                    (0..vocab).map(|_| r.random_range(-2.0..2.0)).collect();
                if prefix.len() < 3 {
                    for t in 0..vocab as u32 {
                        if t != eos {
                            let mut p = prefix.clone();
                            p.push(t);
                            stack.push(p);
                        }
                    }
                }
                tables.insert(prefix, logits);
            }
            let tables = std::rc::Rc::new(tables);
            let session = TableSession {
                vocab,
                prefix: Vec::new(),
                table: {
                    let tables = std::rc::Rc::clone(&tables);
                    std::rc::Rc::new(move |p: &[u32]| tables[p].clone())
                },
            };
            let cfg = BeamConfig {
                beam_width: vocab * vocab * vocab,
                max_new_tokens: 3,
                length_penalty: 0.0,
            };
            let beams = beam_search(session.clone(), &[], &cfg, eos).unwrap();
            let mut all = enumerate_sequences(&session, 3, eos);
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            assert_eq!(beams[0].tokens, all[0].0, "trial {trial}");
            assert!((beams[0].logp - all[0].1).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_width_one_equals_greedy() {
        use rand::Rng as _;
        for trial in 0..50 {
            let seed = 900 + trial;
            let session = TableSession::new(6, move |prefix: &[u32]| {
                let mut r = crate::rng::derive(seed, "toy", prefix.len() as u64);
                let shift = prefix.iter().map(|&t| f64::from(t)).sum::<f64>();
                (0..6).map(|i| r.random_range(-2.0..2.0) + (f64::from(i) - shift) * 0.1).collect()
            });
            let eos = 5;
            let mut g = session.clone();
            let greedy = greedy_decode(&mut g, &[2], 8, eos).unwrap();
            let cfg = BeamConfig { beam_width: 1, max_new_tokens: 8, length_penalty: 0.0 };
            let beams = beam_search(session, &[2], &cfg, eos).unwrap();
            assert_eq!(beams[0].tokens, greedy, "trial {trial}");
        }
    }

    #[test]
    fn greedy_stops_at_eos_and_nothing_follows() {
        let session = TableSession::new(4, |prefix| match prefix.len() {
            0 => vec![5.0, 0.0, 0.0, 0.0],
            1 => vec![0.0, 0.0, 0.0, 9.0], // eos wins
            _ => vec![9.0, 0.0, 0.0, 0.0],
        });
        let mut s = session;
        let out = greedy_decode(&mut s, &[], 10, 3).unwrap();
        assert_eq!(out, vec![0, 3]);
    }

    #[test]
    fn forced_one_hot_logits_reproduce_the_forced_string() {
        let forced = vec![2u32, 0, 1, 3];
        let session = TableSession::new(4, move |prefix| {
            let want = forced.get(prefix.len()).copied().unwrap_or(3);
            (0..4).map(|i| if i == want { 50.0 } else { 0.0 }).collect()
        });
        let mut s = session;
        let out = greedy_decode(&mut s, &[], 10, 3).unwrap();
        assert_eq!(out, vec![2, 0, 1, 3]);
    }

    #[test]
    fn beam_scores_are_non_increasing() {
        let cfg = BeamConfig { beam_width: 5, max_new_tokens: 3, length_penalty: 0.7 };
        let beams = beam_search(fixed_toy(), &[], &cfg, 99).unwrap();
        for pair in beams.windows(2) {
            assert!(pair[0].score >= pair[1].score - 1e-12);
        }
    }

    #[test]
    fn length_penalty_normalizes_scores() {
        let cfg = BeamConfig { beam_width: 3, max_new_tokens: 3, length_penalty: 1.0 };
        let beams = beam_search(fixed_toy(), &[], &cfg, 99).unwrap();
        for b in &beams {
            assert!((b.score - b.logp / b.tokens.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = BeamConfig { beam_width: 0, ..BeamConfig::default() };
        assert!(bad.validate().is_err());
        let bad = BeamConfig { length_penalty: -1.0, ..BeamConfig::default() };
        assert!(bad.validate().is_err());
    }
}
