//! The eight adapter placements `a`..`h`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lora::effective_rank;
use crate::model::{ModuleName, ToyModel};
use crate::numkern::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scheme {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
}

use ModuleName::{Decoder, DurationPredictor, Flow, Projection, TextEncoder};

// Single source of truth for placement membership.
const TABLE: [(Scheme, char, &str, &[ModuleName]); 8] = [
    (Scheme::A, 'a', "text information modeling", &[TextEncoder]),
    (Scheme::B, 'b', "distribution transformation", &[Flow]),
    (Scheme::C, 'c', "decode", &[Decoder]),
    (Scheme::D, 'd', "acoustic information modeling", &[Flow, Decoder]),
    (Scheme::E, 'e', "duration", &[DurationPredictor]),
    (
        Scheme::F,
        'f',
        "duration and text information",
        &[TextEncoder, DurationPredictor],
    ),
    (
        Scheme::G,
        'g',
        "duration and acoustic information",
        &[DurationPredictor, Flow, Decoder],
    ),
    (
        Scheme::H,
        'h',
        "duration, acoustic information and projection",
        &[DurationPredictor, Projection, Flow, Decoder],
    ),
];

impl Scheme {
    pub const ALL: [Scheme; 8] = [
        Scheme::A,
        Scheme::B,
        Scheme::C,
        Scheme::D,
        Scheme::E,
        Scheme::F,
        Scheme::G,
        Scheme::H,
    ];

    fn entry(self) -> &'static (Scheme, char, &'static str, &'static [ModuleName]) {
        &TABLE[self as usize]
    }

    pub fn id(self) -> char {
        self.entry().1
    }

    pub fn description(self) -> &'static str {
        self.entry().2
    }

    /// Modules that receive adapters, in pipeline order.
    pub fn modules(self) -> &'static [ModuleName] {
        self.entry().3
    }

    pub fn contains(self, module: ModuleName) -> bool {
        self.modules().contains(&module)
    }

    pub fn from_id(id: char) -> Result<Self> {
        TABLE
            .iter()
            .find(|e| e.1 == id)
            .map(|e| e.0)
            .ok_or_else(|| {
                Error::config(format!("unknown scheme '{id}', valid ids are a, b, c, d, e, f, g, h"))
            })
    }

    /// Layer paths this scheme adapts on `model`, in path order.
    pub fn target_paths(self, model: &ToyModel) -> Vec<String> {
        model
            .layer_paths()
            .into_iter()
            .filter(|l| ModuleName::of_path(&l.path).is_some_and(|m| self.contains(m)))
            .map(|l| l.path)
            .collect()
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Self::from_id(c.to_ascii_lowercase()),
            _ => Err(Error::config(format!(
                "unknown scheme '{s}', valid ids are a, b, c, d, e, f, g, h"
            ))),
        }
    }
}

pub fn modules_of(id: char) -> Result<&'static [ModuleName]> {
    Scheme::from_id(id).map(Scheme::modules)
}

/// Alpha of a layer whose rank was capped from `r` to `rank`.
pub fn layer_alpha(alpha: f32, r: usize, rank: usize) -> f32 {
    if rank == r {
        alpha
    } else {
        (alpha as f64 * rank as f64 / r as f64) as f32
    }
}

/// Attaches an adapter to every linear and conv layer in the scheme's
/// modules. Each layer gets rank `min(r, d_in_eff, d_out_eff)` and the alpha
/// that keeps its scale at `alpha / r`; factors are drawn from `rng` in path
/// order. All base parameters end up frozen.
pub fn apply(
    model: &mut ToyModel,
    scheme: Scheme,
    r: usize,
    alpha: f32,
    rng: &mut RngState,
) -> Result<Vec<String>> {
    if model.has_adapters() {
        return Err(Error::state("model already carries adapters"));
    }
    if r == 0 {
        return Err(Error::config("rank must be at least 1"));
    }
    model.set_base_trainable(false);
    let mut adapted = Vec::new();
    for (path, _, dense) in model.layers_mut() {
        if !ModuleName::of_path(&path).is_some_and(|m| scheme.contains(m)) {
            continue;
        }
        let rank = effective_rank(r, dense.d_in_eff(), dense.d_out_eff());
        dense.attach(rank, layer_alpha(alpha, r, rank), rng)?;
        adapted.push(path);
    }
    Ok(adapted)
}
