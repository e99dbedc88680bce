//! Depth-growth operators.
//!
//! An operator picks a span of `k` consecutive layers starting at `start`
//! (0-based, feasible range `0..=L-k`), cuts it into `k / block` blocks of
//! `block` layers, and right after each block inserts `block` new layers:
//! either copies of that block or freshly initialized layers. Everything
//! outside the span keeps its relative order.
//!
//! ```text
//! L=6, k=3, start=1 (1-based i=2)
//! block=1, dup   [1,2,3,4,5,6] -> [1,2,2,3,3,4,4,5,6]
//! block=3, dup   [1,2,3,4,5,6] -> [1,2,3,4,2,3,4,5,6]
//! block=3, rand  [1,2,3,4,5,6] -> [1,2,3,4,R,R,R,5,6]
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::checkpoint::{Checkpoint, ProvenanceEntry};
use crate::error::{Error, Result};
use crate::nn::{init_layer, layer_rng, ParamBlocks};
use crate::optim::remap_state;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    Duplicate,
    Random,
}

impl InitScheme {
    pub fn tag(self) -> &'static str {
        match self {
            InitScheme::Duplicate => "dup",
            InitScheme::Random => "rand",
        }
    }
}

/// One point in the design space. Serializes as `i{start}-b{block}-{dup|rand}-k{grow}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GrowthOperator {
    pub start: usize,
    pub block: usize,
    pub scheme: InitScheme,
    pub grow: usize,
}

impl GrowthOperator {
    /// Check the operator against a model of `layers` layers.
    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.grow < 1 {
            return Err(Error::Operator(format!("{self}: grow amount k must be >= 1")));
        }
        if self.block < 1 || self.grow % self.block != 0 {
            return Err(Error::Operator(format!(
                "{self}: block size b={} must divide k={} (feasible b: {:?})",
                self.block,
                self.grow,
                divisors(self.grow)
            )));
        }
        if self.grow > layers {
            return Err(Error::Operator(format!("{self}: k={} exceeds the model depth L={layers}", self.grow)));
        }
        if self.start > layers - self.grow {
            return Err(Error::Operator(format!(
                "{self}: start index i={} out of range for L={layers}, k={} (feasible i: 0..={})",
                self.start,
                self.grow,
                layers - self.grow
            )));
        }
        Ok(())
    }

    /// Sort key used for deterministic tie-breaking: index, block, scheme.
    pub fn order_key(&self) -> (usize, usize, InitScheme, usize) {
        (self.start, self.block, self.scheme, self.grow)
    }
}

impl fmt::Display for GrowthOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i{}-b{}-{}-k{}", self.start, self.block, self.scheme.tag(), self.grow)
    }
}

impl FromStr for GrowthOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Operator(format!("cannot parse {s:?}; expected i{{i}}-b{{b}}-{{dup|rand}}-k{{k}}, e.g. i8-b4-dup-k4"))
        };
        let parts: Vec<&str> = s.split('-').collect();
        let [i, b, scheme, k] = parts.as_slice() else { return Err(bad()) };
        let num = |p: &str, prefix: char| -> Result<usize> {
            p.strip_prefix(prefix).and_then(|n| n.parse().ok()).ok_or_else(bad)
        };
        let scheme = match *scheme {
            "dup" => InitScheme::Duplicate,
            "rand" => InitScheme::Random,
            _ => return Err(bad()),
        };
        Ok(GrowthOperator { start: num(i, 'i')?, block: num(b, 'b')?, scheme, grow: num(k, 'k')? })
    }
}

impl Serialize for GrowthOperator {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GrowthOperator {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSource {
    /// Parameters (and optimizer moments) come from this old layer.
    Old(usize),
    /// Fresh layer; `ordinal` numbers the random layers of one growth event
    /// and keys their init stream together with the growth seed.
    Random { ordinal: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMapEntry {
    pub position: usize,
    pub source: LayerSource,
    /// True for the `k` layers the operator adds.
    pub inserted: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthLayerMap {
    old_layers: usize,
    entries: Vec<LayerMapEntry>,
}

impl GrowthLayerMap {
    pub fn identity(layers: usize) -> Self {
        GrowthLayerMap {
            old_layers: layers,
            entries: (0..layers)
                .map(|i| LayerMapEntry { position: i, source: LayerSource::Old(i), inserted: false })
                .collect(),
        }
    }

    pub fn entries(&self) -> &[LayerMapEntry] {
        &self.entries
    }

    pub fn old_layers(&self) -> usize {
        self.old_layers
    }

    pub fn new_layers(&self) -> usize {
        self.entries.len()
    }

    /// 1-based rendering: `Some(j)` for old layer `j`, `None` for random.
    pub fn one_based(&self) -> Vec<Option<usize>> {
        self.entries
            .iter()
            .map(|e| match e.source {
                LayerSource::Old(i) => Some(i + 1),
                LayerSource::Random { .. } => None,
            })
            .collect()
    }

    /// `[1,2,R,3]`-style text form.
    pub fn render(&self) -> String {
        let items: Vec<String> =
            self.one_based().into_iter().map(|s| s.map_or_else(|| "R".to_string(), |j| j.to_string())).collect();
        format!("[{}]", items.join(","))
    }
}

/// The layer map an operator induces on an `layers`-layer model.
pub fn layer_map(op: &GrowthOperator, layers: usize) -> Result<GrowthLayerMap> {
    op.validate(layers)?;
    let mut entries = Vec::with_capacity(layers + op.grow);
    let mut push = |source, inserted| {
        let position = entries.len();
        entries.push(LayerMapEntry { position, source, inserted });
    };
    for l in 0..op.start {
        push(LayerSource::Old(l), false);
    }
    let mut ordinal = 0;
    for block_start in (op.start..op.start + op.grow).step_by(op.block) {
        for l in block_start..block_start + op.block {
            push(LayerSource::Old(l), false);
        }
        for l in block_start..block_start + op.block {
            let source = match op.scheme {
                InitScheme::Duplicate => LayerSource::Old(l),
                InitScheme::Random => {
                    ordinal += 1;
                    LayerSource::Random { ordinal: ordinal - 1 }
                }
            };
            push(source, true);
        }
    }
    for l in op.start + op.grow..layers {
        push(LayerSource::Old(l), false);
    }
    Ok(GrowthLayerMap { old_layers: layers, entries })
}

/// Candidate lists for one growth event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpace {
    pub indices: Vec<usize>,
    pub block_sizes: Vec<usize>,
    pub schemes: Vec<InitScheme>,
    pub grow: usize,
}

impl DesignSpace {
    /// Every feasible index and every divisor of `grow`, for the given schemes.
    pub fn full(layers: usize, grow: usize, schemes: &[InitScheme]) -> Self {
        DesignSpace {
            indices: (0..=layers.saturating_sub(grow)).collect(),
            block_sizes: divisors(grow),
            schemes: schemes.to_vec(),
            grow,
        }
    }
}

pub fn divisors(k: usize) -> Vec<usize> {
    (1..=k).filter(|b| k % b == 0).collect()
}

/// All valid operators of a design space for an `layers`-layer model, ordered
/// by index, then block size, then scheme (Duplicate first).
pub fn enumerate(space: &DesignSpace, layers: usize) -> Result<Vec<GrowthOperator>> {
    if space.grow < 1 {
        return Err(Error::config("design space grow amount k must be >= 1"));
    }
    if layers < space.grow {
        return Err(Error::config(format!("design space needs L >= k, got L={layers}, k={}", space.grow)));
    }
    let sorted = |v: &[usize]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut schemes = space.schemes.clone();
    schemes.sort();
    schemes.dedup();
    let mut ops = Vec::new();
    for &start in &sorted(&space.indices) {
        for &block in &sorted(&space.block_sizes) {
            for &scheme in &schemes {
                let op = GrowthOperator { start, block, scheme, grow: space.grow };
                if op.validate(layers).is_ok() {
                    ops.push(op);
                }
            }
        }
    }
    if ops.is_empty() {
        return Err(Error::config(format!(
            "design space {space:?} has no valid operator for L={layers} (feasible i: 0..={}, feasible b: {:?})",
            layers - space.grow,
            divisors(space.grow)
        )));
    }
    Ok(ops)
}

/// Duplicate the final `block` layers on top of the stack.
pub fn post_stack_operator(block: usize, layers: usize) -> Result<GrowthOperator> {
    if block < 1 || block > layers {
        return Err(Error::config(format!("post-stacking block size b={block} must be in 1..={layers}")));
    }
    Ok(GrowthOperator { start: layers - block, block, scheme: InitScheme::Duplicate, grow: block })
}

/// Grow a checkpoint. Duplicated layers are bit-exact copies, random layers
/// are fresh inits keyed on `(seed, ordinal)`, non-layer blocks and the step
/// counter carry over, and the optimizer state is remapped alongside.
pub fn apply_growth(ckpt: &Checkpoint, op: &GrowthOperator, seed: u64) -> Result<Checkpoint> {
    ckpt.validate()?;
    let old = ckpt.params.layers.len();
    let map = layer_map(op, old)?;
    let config = ckpt.params.config.with_layers(map.new_layers());
    let layers = map
        .entries()
        .iter()
        .map(|e| match e.source {
            LayerSource::Old(i) => ckpt.params.layers[i].clone(),
            LayerSource::Random { ordinal } => init_layer(&config, &mut layer_rng(seed, "grow", ordinal)),
        })
        .collect();
    let params = ParamBlocks {
        config,
        embedding: ckpt.params.embedding.clone(),
        layers,
        final_norm: ckpt.params.final_norm.clone(),
        head: ckpt.params.head.clone(),
    };
    let opt = remap_state(&ckpt.opt, &map)?;
    let mut provenance = ckpt.provenance.clone();
    provenance.push(ProvenanceEntry {
        step: ckpt.step,
        operator: op.to_string(),
        seed,
        layers_before: old,
        layers_after: map.new_layers(),
    });
    let grown = Checkpoint { params, opt, step: ckpt.step, data_seed: ckpt.data_seed, provenance };
    grown.validate()?;
    Ok(grown)
}
