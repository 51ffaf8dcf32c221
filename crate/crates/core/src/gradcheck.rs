//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::backbone::{MetaInput, Model};
use crate::error::{Error, Result};
use crate::fusion::{MetaMask, MetaRecord};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_MAX_COORDS: usize = 64;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates checked per parameter tensor; larger tensors are sampled.
    pub max_coords: usize,
    pub seed: u64,
    /// Name of a primitive whose backward rule is sign-flipped (negative control).
    pub sabotage: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: DEFAULT_EPS,
            max_coords: DEFAULT_MAX_COORDS,
            seed: 0,
            sabotage: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per parameter path.
    pub per_param: BTreeMap<String, f64>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.values().cloned().fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_error() < tol
    }

    /// Worst error per group, where `group` maps a parameter path to its group label.
    pub fn grouped(&self, group: impl Fn(&str) -> String) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        for (name, err) in &self.per_param {
            let e = out.entry(group(name)).or_insert(0.0);
            *e = e.max(*err);
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

fn evaluate<F>(f: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.value(loss).item()
}

/// Compares tape gradients of `f` against central differences
/// `(f(θ+eps) − f(θ−eps)) / 2eps`, coordinate by coordinate.
///
/// `f` must be deterministic: it is evaluated twice at `params` first and any
/// difference is reported as an error.
pub fn finite_diff_check<F>(
    f: F,
    params: &ParamStore,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var> + Sync,
{
    let mut tape = match &opts.sabotage {
        Some(op) => Tape::with_sabotage(op),
        None => Tape::new(),
    };
    let loss = f(&mut tape, params)?;
    let base = tape.value(loss).item()?;
    let again = evaluate(&f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "finite_diff_check: function returned {base} then {again} for identical \
             parameters; fix the RNG seed of any sampling (e.g. meta masking) inside it"
        )));
    }
    let grads = tape.backward(loss)?.to_store(params);

    let names: Vec<&str> = params.names().collect();
    let results: Result<Vec<(String, f64, usize)>> = names
        .par_iter()
        .enumerate()
        .map(|(i, &name)| {
            let n = params.get(name).expect("listed").numel();
            let coords: Vec<usize> = if n <= opts.max_coords {
                (0..n).collect()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut picked = sample(&mut rng, n, opts.max_coords).into_vec();
                picked.sort_unstable();
                picked
            };
            let analytic = grads.get(name).expect("aligned");
            let mut work = params.clone();
            let mut worst: f64 = 0.0;
            for &c in &coords {
                let orig = params.get(name).expect("listed").data()[c];
                work.get_mut(name).expect("listed").data_mut()[c] = orig + opts.eps;
                let plus = evaluate(&f, &work)?;
                work.get_mut(name).expect("listed").data_mut()[c] = orig - opts.eps;
                let minus = evaluate(&f, &work)?;
                work.get_mut(name).expect("listed").data_mut()[c] = orig;
                let numeric = (plus - minus) / (2.0 * opts.eps);
                worst = worst.max(relative_error(analytic.data()[c], numeric));
            }
            Ok((name.to_string(), worst, coords.len()))
        })
        .collect();

    let mut per_param = BTreeMap::new();
    let mut coords_checked = 0;
    for (name, err, count) in results? {
        per_param.insert(name, err);
        coords_checked += count;
    }
    Ok(GradCheckReport {
        per_param,
        coords_checked,
    })
}

/// Checks the cross-entropy of one labelled sample through the whole model.
/// `record` is ignored by vision-only models and never masked otherwise.
pub fn check_model(
    model: &Model,
    image: &Tensor,
    record: Option<&MetaRecord>,
    label: usize,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let meta = match (model.config.fusion.uses_meta(), record) {
        (false, _) => MetaInput::Absent,
        (true, Some(record)) => MetaInput::Record {
            record,
            mask: MetaMask::NONE,
        },
        (true, None) => {
            return Err(Error::Validation(
                "a fusion model needs a metadata record for gradient checking".into(),
            ))
        }
    };
    finite_diff_check(
        |tape, params| {
            let m = Model {
                config: model.config.clone(),
                params: params.clone(),
            };
            let out = m.forward(tape, image, meta)?;
            tape.cross_entropy(out.logits, label)
        },
        &model.params,
        opts,
    )
}

/// Coarse architectural component a parameter path belongs to.
pub fn component_of(path: &str) -> &'static str {
    let parts: Vec<&str> = path.split('.').collect();
    match parts.as_slice() {
        ["s0", ..] => "conv stem",
        [s, _, "se", ..] if s.starts_with('s') => "squeeze-excitation",
        ["s1" | "s2", ..] => "mbconv",
        [_, _, "attn", "rel_bias_table" | "shared_bias"] => "relative bias",
        [_, _, "attn", ..] => "attention",
        ["s3" | "s4", "embed" | "embed_norm", ..] => "patch embedding",
        ["s3" | "s4", "cls_token"] => "class token",
        ["s3" | "s4", "meta_null"] => "null meta token",
        ["s4", "meta_proj", ..] => "meta embedding",
        ["s3" | "s4", _, "norm1" | "norm2" | "mlp", ..] => "transformer block",
        ["meta", ..] => "meta embedding",
        ["agg", ..] => "class-token aggregation",
        ["late", "meta", ..] => "meta embedding",
        ["late", ..] => "late-fusion head",
        ["head", ..] => "linear head",
        _ => "other",
    }
}
