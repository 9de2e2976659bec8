//! Compression-discard gradient correction.
//!
//! The compression head is trained normally, while the encoder receives the
//! reversed compression gradient. Before summing, the main-task gradient and
//! the reversed one are each projected onto the normal plane of the other
//! whenever they conflict (negative inner product).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{ModelParams, ENCODER_PARAMS};
use crate::optim::{adam_step, AdamState};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{dot, Tensor};

/// Flat encoder+attention gradients per loss group, in [`ENCODER_PARAMS`]
/// order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientBundle {
    /// `∇(L_pair + L_unpair + L_tf)` as enabled.
    pub main: Option<Vec<f64>>,
    /// `∇L_cmp`, not yet reversed.
    pub cmp: Option<Vec<f64>>,
}

impl GradientBundle {
    pub fn len(&self) -> usize {
        self.main
            .as_ref()
            .or(self.cmp.as_ref())
            .map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradients reaching the two heads.
#[derive(Clone, Debug, Default)]
pub struct HeadGrads {
    pub tf: BTreeMap<String, Tensor>,
    pub cmp: BTreeMap<String, Tensor>,
}

pub fn flatten_encoder(grads: &Gradients) -> Vec<f64> {
    ENCODER_PARAMS
        .iter()
        .flat_map(|n| {
            grads
                .get(n)
                .expect("encoder parameter registered on tape")
                .data()
                .iter()
                .copied()
        })
        .collect()
}

fn pick(grads: &Gradients, names: &[&str]) -> BTreeMap<String, Tensor> {
    names
        .iter()
        .filter_map(|&n| grads.get(n).map(|g| (n.to_string(), g.clone())))
        .collect()
}

/// Runs one backward pass per available loss group over the shared tape.
pub fn collect_gradients(
    tape: &Tape,
    main: Option<Var>,
    cmp: Option<Var>,
) -> Result<(GradientBundle, HeadGrads)> {
    let mut bundle = GradientBundle::default();
    let mut heads = HeadGrads::default();
    if let Some(loss) = main {
        let g = tape.backward(loss)?;
        bundle.main = Some(flatten_encoder(&g));
        heads.tf = pick(&g, &crate::model::HEAD_TF_PARAMS);
    }
    if let Some(loss) = cmp {
        let g = tape.backward(loss)?;
        bundle.cmp = Some(flatten_encoder(&g));
        heads.cmp = pick(&g, &crate::model::HEAD_CMP_PARAMS);
    }
    Ok((bundle, heads))
}

fn project_away(g: &[f64], onto: &[f64], onto_sq: f64) -> Vec<f64> {
    let d = dot(g, onto);
    if d >= 0.0 || onto_sq == 0.0 {
        return g.to_vec();
    }
    let c = d / onto_sq;
    g.iter().zip(onto).map(|(g, o)| g - c * o).collect()
}

/// The two projected vectors `(g_main', g_rev')`. Each is projected against
/// the *original* other vector, and only when the pair conflicts.
pub fn pcgrad_components(g_main: &[f64], g_rev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if g_main.len() != g_rev.len() {
        return Err(Error::ShapeMismatch {
            op: "pcgrad_project",
            lhs: vec![g_main.len()],
            rhs: vec![g_rev.len()],
        });
    }
    let rev_sq = dot(g_rev, g_rev);
    let main_sq = dot(g_main, g_main);
    Ok((project_away(g_main, g_rev, rev_sq), project_away(g_rev, g_main, main_sq)))
}

/// Mutual conflicting-gradient projection of two groups, then their sum.
///
/// `g_rev` is the already-reversed compression gradient. A zero `g_rev`
/// returns `g_main` unchanged.
pub fn pcgrad_project(g_main: &[f64], g_rev: &[f64]) -> Result<Vec<f64>> {
    let (main_p, rev_p) = pcgrad_components(g_main, g_rev)?;
    if g_rev.iter().all(|&g| g == 0.0) {
        return Ok(g_main.to_vec());
    }
    Ok(main_p.iter().zip(&rev_p).map(|(a, b)| a + b).collect())
}

/// Encoder update direction for a bundle: plain sum when correction is off,
/// projection of `main` against `−cmp` when on.
pub fn encoder_direction(bundle: &GradientBundle, correct: bool) -> Result<Vec<f64>> {
    let n = ModelParams::count(&ENCODER_PARAMS);
    let main = bundle.main.clone().unwrap_or_else(|| vec![0.0; n]);
    let Some(cmp) = &bundle.cmp else {
        return Ok(main);
    };
    let rev: Vec<f64> = cmp.iter().map(|g| -g).collect();
    if correct {
        pcgrad_project(&main, &rev)
    } else {
        Ok(main.iter().zip(&rev).map(|(a, b)| a + b).collect())
    }
}

/// Splits a flat encoder vector back into named tensors.
pub fn unflatten_encoder(params: &ModelParams, flat: &[f64]) -> Result<BTreeMap<String, Tensor>> {
    let expected = ModelParams::count(&ENCODER_PARAMS);
    if flat.len() != expected {
        return Err(Error::ShapeMismatch {
            op: "unflatten_encoder",
            lhs: vec![flat.len()],
            rhs: vec![expected],
        });
    }
    let mut out = BTreeMap::new();
    let mut off = 0;
    for name in ENCODER_PARAMS {
        let p = params.get(name).expect("known parameter");
        let n = p.numel();
        out.insert(
            name.to_string(),
            Tensor::new(p.shape().to_vec(), flat[off..off + n].to_vec())?,
        );
        off += n;
    }
    Ok(out)
}

/// Applies the encoder direction and both heads' own gradients with Adam.
pub fn apply_update(
    params: &mut ModelParams,
    encoder_grad: &[f64],
    heads: &HeadGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let mut grads = unflatten_encoder(params, encoder_grad)?;
    grads.extend(heads.tf.iter().map(|(k, v)| (k.clone(), v.clone())));
    grads.extend(heads.cmp.iter().map(|(k, v)| (k.clone(), v.clone())));
    adam_step(params, &grads, state, lr)
}
