//! A toy grammar with deterministic head rules.
//!
//! Sentences have the shape `[det] adj* noun verb ([det] adj* noun)?`.
//! Determiners and adjectives attach to their noun, the first noun is the
//! `nsubj` of the verb, the optional second noun its `obj`, and the verb
//! is the `root`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::treebank::{Sentence, Token, Treebank};

pub const DETERMINERS: [&str; 5] = ["the", "a", "this", "that", "every"];

pub const ADJECTIVES: [&str; 15] = [
    "big", "small", "red", "old", "young", "happy", "quiet", "green", "tall", "brave", "shy", "bright", "dark",
    "cold", "warm",
];

pub const NOUNS: [&str; 20] = [
    "dog", "cat", "bird", "child", "farmer", "horse", "teacher", "river", "tree", "house", "ship", "king", "queen",
    "apple", "stone", "friend", "wolf", "baker", "poet", "garden",
];

pub const VERBS: [&str; 10] = [
    "sees", "likes", "finds", "chases", "paints", "hears", "follows", "greets", "watches", "helps",
];

pub const LABELS: [&str; 5] = ["root", "nsubj", "obj", "det", "amod"];

/// Sampling probabilities for the optional parts of a sentence.
#[derive(Clone, Copy, Debug)]
pub struct ToyGrammar {
    pub p_det: f64,
    pub p_adj: f64,
    pub max_adj: usize,
    pub p_obj: f64,
}

impl Default for ToyGrammar {
    fn default() -> Self {
        ToyGrammar {
            p_det: 0.8,
            p_adj: 0.4,
            max_adj: 2,
            p_obj: 0.6,
        }
    }
}

struct Draft {
    form: &'static str,
    role: Role,
}

#[derive(Clone, Copy, PartialEq)]
enum Role {
    Det,
    Adj,
    Noun,
    Verb,
}

impl ToyGrammar {
    fn noun_phrase(&self, rng: &mut impl Rng, out: &mut Vec<Draft>) {
        if rng.gen_bool(self.p_det) {
            out.push(Draft {
                form: DETERMINERS.choose(rng).unwrap(),
                role: Role::Det,
            });
        }
        let mut n = 0;
        while n < self.max_adj && rng.gen_bool(self.p_adj) {
            out.push(Draft {
                form: ADJECTIVES.choose(rng).unwrap(),
                role: Role::Adj,
            });
            n += 1;
        }
        out.push(Draft {
            form: NOUNS.choose(rng).unwrap(),
            role: Role::Noun,
        });
    }

    pub fn sentence(&self, rng: &mut impl Rng) -> Sentence {
        let mut d = Vec::new();
        self.noun_phrase(rng, &mut d);
        let verb = d.len() + 1;
        d.push(Draft {
            form: VERBS.choose(rng).unwrap(),
            role: Role::Verb,
        });
        if rng.gen_bool(self.p_obj) {
            self.noun_phrase(rng, &mut d);
        }
        let tokens = d
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let index = k + 1;
                let (head, deprel) = match w.role {
                    Role::Verb => (0, "root"),
                    Role::Noun if index < verb => (verb, "nsubj"),
                    Role::Noun => (verb, "obj"),
                    Role::Det | Role::Adj => {
                        let noun = (k..d.len()).find(|&m| d[m].role == Role::Noun).unwrap() + 1;
                        (noun, if w.role == Role::Det { "det" } else { "amod" })
                    }
                };
                Token {
                    index,
                    form: w.form.to_string(),
                    head,
                    deprel: deprel.to_string(),
                }
            })
            .collect();
        Sentence { tokens }
    }

    pub fn treebank(&self, n: usize, seed: u64) -> Treebank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tb = Treebank::new((0..n).map(|_| self.sentence(&mut rng)).collect());
        // keep the label inventory fixed regardless of what was sampled
        tb.labels = LABELS.iter().map(|s| s.to_string()).collect();
        tb
    }
}

/// 200 training and 50 development sentences.
pub fn toy_split(seed: u64) -> (Treebank, Treebank) {
    let g = ToyGrammar::default();
    (g.treebank(200, seed), g.treebank(50, seed.wrapping_add(1)))
}
