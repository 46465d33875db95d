//! Central-difference gradient oracle and the layer/loss check suite.
//!
//! [`finite_difference_gradient`] is the independent route against which
//! the tape's reverse sweep is verified: it never touches the backward
//! code, only repeated forward evaluations. [`run_suite`] walks every
//! layer type and every loss, compares both routes over a number of
//! seeds, and reports the worst relative error per op.

use crate::error::Result;
use crate::numerics::tape::{NceMode, NodeId, Padding, Tape};
use crate::numerics::tensor::Tensor;
use crate::numerics::{uniform_tensor, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Central finite differences of `f` at `params`, step `h` per
/// coordinate. `f` must be pure and deterministic.
pub fn finite_difference_gradient<F>(f: F, params: &[Tensor], h: Real) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<Real>,
{
    let mut grads = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.to_vec();
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].shape().to_vec());
        for j in 0..params[pi].len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let plus = f(&work)?;
            work[pi].data_mut()[j] = orig - h;
            let minus = f(&work)?;
            work[pi].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub op: String,
    pub max_rel_err: Real,
    pub pass: bool,
}

/// Suite report: one entry per checked op plus the overall worst case.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
    pub tolerance: Real,
}

impl CheckReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn worst(&self) -> Option<&CheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Deliberate corruption of the analytic route, for verifying that the
/// checker actually fails when gradients are wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Flip the sign of the first analytic gradient entry of every op.
    FlipSign,
}

type GraphBuilder = dyn Fn(&[Tensor]) -> Result<(Tape, NodeId, Vec<NodeId>)>;

/// Relative error between the analytic and finite-difference gradients,
/// measured entry-wise against the larger gradient's max-norm so that
/// near-zero entries do not blow up the ratio.
fn relative_error(analytic: &[Tensor], fd: &[Tensor]) -> Real {
    let mut scale: Real = 1e-6;
    for (a, f) in analytic.iter().zip(fd) {
        for (&x, &y) in a.data().iter().zip(f.data()) {
            scale = scale.max(x.abs()).max(y.abs());
        }
    }
    let mut worst: Real = 0.0;
    for (a, f) in analytic.iter().zip(fd) {
        for (&x, &y) in a.data().iter().zip(f.data()) {
            worst = worst.max((x - y).abs() / scale);
        }
    }
    worst
}

fn check_graph(
    name: &str,
    seeds: u64,
    tolerance: Real,
    h: Real,
    fault: Fault,
    make_params: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: &GraphBuilder,
) -> Result<CheckEntry> {
    let mut max_rel: Real = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + seed);
        let params = make_params(&mut rng);
        let (tape, loss, param_ids) = build(&params)?;
        let grads = tape.backward(loss)?;
        let mut analytic: Vec<Tensor> =
            param_ids.iter().map(|&id| grads.get(id).clone()).collect();
        if fault == Fault::FlipSign {
            if let Some(first) = analytic.first_mut() {
                if let Some(v) = first.data_mut().first_mut() {
                    *v = -*v;
                }
            }
        }
        let fd = finite_difference_gradient(
            |ps| {
                let (tape, loss, _) = build(ps)?;
                tape.value(loss).item()
            },
            &params,
            h,
        )?;
        max_rel = max_rel.max(relative_error(&analytic, &fd));
    }
    Ok(CheckEntry {
        op: name.to_string(),
        max_rel_err: max_rel,
        pass: max_rel <= tolerance,
    })
}

/// Run the full layer/loss gradient-check suite.
///
/// Every layer type and every loss appears exactly once in the report.
/// `seeds` random restarts per op; tolerance 1e-4 against central
/// differences with `h = 1e-6`.
pub fn run_suite(seeds: u64, fault: Fault) -> Result<CheckReport> {
    let tolerance: Real = 1e-4;
    let h: Real = 1e-6;
    let mut entries = Vec::new();
    let mut run = |name: &str,
                   make_params: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
                   build: &GraphBuilder|
     -> Result<()> {
        entries.push(check_graph(name, seeds, tolerance, h, fault, make_params, build)?);
        Ok(())
    };

    // Dense layer through a scalar mean.
    run(
        "linear",
        &|rng| {
            vec![
                uniform_tensor(rng, vec![3, 5], -1.0, 1.0),
                uniform_tensor(rng, vec![5, 4], -1.0, 1.0),
                uniform_tensor(rng, vec![4], -0.5, 0.5),
            ]
        },
        &|ps| {
            let mut tape = Tape::new();
            let x = tape.leaf(ps[0].clone())?;
            let w = tape.leaf(ps[1].clone())?;
            let b = tape.leaf(ps[2].clone())?;
            let y = tape.linear(x, w, b)?;
            let loss = tape.mean_all(y)?;
            Ok((tape, loss, vec![x, w, b]))
        },
    )?;

    run(
        "relu",
        &|rng| vec![uniform_tensor(rng, vec![4, 6], -1.0, 1.0)],
        &|ps| {
            let mut tape = Tape::new();
            let x = tape.leaf(ps[0].clone())?;
            let y = tape.relu(x)?;
            let sq = tape.mul(y, y)?;
            let loss = tape.mean_all(sq)?;
            Ok((tape, loss, vec![x]))
        },
    )?;

    for (name, padding) in [("conv1d_valid", Padding::Valid), ("conv1d_same", Padding::Same)] {
        run(
            name,
            &|rng| {
                vec![
                    uniform_tensor(rng, vec![2, 2, 10], -1.0, 1.0),
                    uniform_tensor(rng, vec![3, 2, 3], -1.0, 1.0),
                    uniform_tensor(rng, vec![3], -0.5, 0.5),
                ]
            },
            &move |ps| {
                let mut tape = Tape::new();
                let x = tape.leaf(ps[0].clone())?;
                let w = tape.leaf(ps[1].clone())?;
                let b = tape.leaf(ps[2].clone())?;
                let y = tape.conv1d(x, w, b, padding)?;
                let sq = tape.mul(y, y)?;
                let loss = tape.mean_all(sq)?;
                Ok((tape, loss, vec![x, w, b]))
            },
        )?;
    }

    run(
        "batchnorm_train",
        &|rng| {
            vec![
                uniform_tensor(rng, vec![3, 2, 6], -1.0, 1.0),
                uniform_tensor(rng, vec![2], 0.5, 1.5),
                uniform_tensor(rng, vec![2], -0.5, 0.5),
            ]
        },
        &|ps| {
            let mut tape = Tape::new();
            let x = tape.leaf(ps[0].clone())?;
            let g = tape.leaf(ps[1].clone())?;
            let b = tape.leaf(ps[2].clone())?;
            let y = tape.batchnorm_train(x, g, b, 1e-5)?;
            let sq = tape.mul(y, y)?;
            let loss = tape.mean_all(sq)?;
            Ok((tape, loss, vec![x, g, b]))
        },
    )?;

    run(
        "batchnorm_eval",
        &|rng| {
            vec![
                uniform_tensor(rng, vec![3, 2, 6], -1.0, 1.0),
                uniform_tensor(rng, vec![2], 0.5, 1.5),
                uniform_tensor(rng, vec![2], -0.5, 0.5),
            ]
        },
        &|ps| {
            let mut tape = Tape::new();
            let x = tape.leaf(ps[0].clone())?;
            let g = tape.leaf(ps[1].clone())?;
            let b = tape.leaf(ps[2].clone())?;
            let y = tape.batchnorm_eval(x, g, b, 1e-5, &[0.1, -0.2], &[0.9, 1.1])?;
            let sq = tape.mul(y, y)?;
            let loss = tape.mean_all(sq)?;
            Ok((tape, loss, vec![x, g, b]))
        },
    )?;

    run(
        "maxpool1d",
        &|rng| vec![uniform_tensor(rng, vec![2, 2, 12], -1.0, 1.0)],
        &|ps| {
            let mut tape = Tape::new();
            let x = tape.leaf(ps[0].clone())?;
            let y = tape.maxpool1d(x, 4, 4)?;
            let sq = tape.mul(y, y)?;
            let loss = tape.mean_all(sq)?;
            Ok((tape, loss, vec![x]))
        },
    )?;

    run(
        "attention",
        &|rng| {
            vec![
                uniform_tensor(rng, vec![2, 3, 5], -1.0, 1.0),
                uniform_tensor(rng, vec![3, 3], -0.6, 0.6),
                uniform_tensor(rng, vec![3, 3], -0.6, 0.6),
                uniform_tensor(rng, vec![3, 3], -0.6, 0.6),
            ]
        },
        &|ps| {
            let mut tape = Tape::new();
            let x = tape.leaf(ps[0].clone())?;
            let wq = tape.leaf(ps[1].clone())?;
            let wk = tape.leaf(ps[2].clone())?;
            let wv = tape.leaf(ps[3].clone())?;
            let y = tape.attention(x, wq, wk, wv)?;
            let sq = tape.mul(y, y)?;
            let loss = tape.mean_all(sq)?;
            Ok((tape, loss, vec![x, wq, wk, wv]))
        },
    )?;

    run(
        "softmax",
        &|rng| vec![uniform_tensor(rng, vec![3, 4], -2.0, 2.0)],
        &|ps| {
            let mut tape = Tape::new();
            let x = tape.leaf(ps[0].clone())?;
            let s = tape.softmax_rows(x)?;
            let sq = tape.mul(s, s)?;
            let loss = tape.mean_all(sq)?;
            Ok((tape, loss, vec![x]))
        },
    )?;

    run(
        "l2_normalize_rows",
        &|rng| {
            vec![
                uniform_tensor(rng, vec![4, 6], 0.2, 1.2),
                uniform_tensor(rng, vec![4, 6], -1.0, 1.0),
            ]
        },
        &|ps| {
            let mut tape = Tape::new();
            let x = tape.leaf(ps[0].clone())?;
            let c = tape.leaf(ps[1].clone())?;
            let z = tape.l2_normalize_rows(x)?;
            let weighted = tape.mul(z, c)?;
            let loss = tape.sum_all(weighted)?;
            Ok((tape, loss, vec![x, c]))
        },
    )?;

    // Predictive contrastive loss on random 4x8 embeddings, through
    // the row normalization, in both denominator modes.
    for (name, mode) in [
        ("predictive_nce_infonce", NceMode::InfoNce),
        ("predictive_nce_paper_literal", NceMode::PaperLiteral),
    ] {
        run(
            name,
            &|rng| {
                vec![
                    uniform_tensor(rng, vec![4, 8], -1.0, 1.0),
                    uniform_tensor(rng, vec![4, 8], -1.0, 1.0),
                ]
            },
            &move |ps| {
                let mut tape = Tape::new();
                let p_raw = tape.leaf(ps[0].clone())?;
                let z_raw = tape.leaf(ps[1].clone())?;
                let p = tape.l2_normalize_rows(p_raw)?;
                let z = tape.l2_normalize_rows(z_raw)?;
                let loss = tape.predictive_nce(p, z, 0.5, mode)?;
                Ok((tape, loss, vec![p_raw, z_raw]))
            },
        )?;
    }

    run(
        "ntxent",
        &|rng| vec![uniform_tensor(rng, vec![6, 5], -1.0, 1.0)],
        &|ps| {
            let mut tape = Tape::new();
            let v_raw = tape.leaf(ps[0].clone())?;
            let v = tape.l2_normalize_rows(v_raw)?;
            let loss = tape.ntxent(v, 0.5)?;
            Ok((tape, loss, vec![v_raw]))
        },
    )?;

    run(
        "cross_entropy",
        &|rng| vec![uniform_tensor(rng, vec![5, 4], -2.0, 2.0)],
        &|ps| {
            let mut tape = Tape::new();
            let x = tape.leaf(ps[0].clone())?;
            let loss = tape.cross_entropy(x, &[0, 3, 1, 2, 1])?;
            Ok((tape, loss, vec![x]))
        },
    )?;

    // Three-layer network end to end: conv -> relu -> pool -> dense ->
    // cross-entropy, checking all parameters jointly.
    run(
        "composite_net",
        &|rng| {
            vec![
                uniform_tensor(rng, vec![3, 2, 12], -1.0, 1.0),
                uniform_tensor(rng, vec![4, 2, 3], -0.7, 0.7),
                uniform_tensor(rng, vec![4], -0.3, 0.3),
                uniform_tensor(rng, vec![12, 3], -0.7, 0.7),
                uniform_tensor(rng, vec![3], -0.3, 0.3),
            ]
        },
        &|ps| {
            let mut tape = Tape::new();
            let x = tape.leaf(ps[0].clone())?;
            let cw = tape.leaf(ps[1].clone())?;
            let cb = tape.leaf(ps[2].clone())?;
            let dw = tape.leaf(ps[3].clone())?;
            let db = tape.leaf(ps[4].clone())?;
            let c = tape.conv1d(x, cw, cb, Padding::Valid)?; // (3, 4, 10)
            let r = tape.relu(c)?;
            let p = tape.maxpool1d(r, 3, 3)?; // (3, 4, 3)
            let f = tape.flatten(p)?; // (3, 12)
            let logits = tape.linear(f, dw, db)?;
            let loss = tape.cross_entropy(logits, &[0, 2, 1])?;
            Ok((tape, loss, vec![x, cw, cb, dw, db]))
        },
    )?;

    Ok(CheckReport { entries, tolerance })
}
