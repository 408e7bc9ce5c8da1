//! Finite-difference verification of analytic gradients.

use super::{Graph, NodeId, Tensor};
use crate::error::Result;

const EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Named finite-difference checks for every differentiable primitive.
/// Inputs are random but seeded; activations with kinks are sampled away
/// from their non-differentiable points.
pub fn primitive_checks() -> Result<Vec<(&'static str, f64)>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let mut rand_t = |shape: Vec<usize>, lo: f64, hi: f64| {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    };
    let a = rand_t(vec![2, 3], -2.0, 2.0);
    let b = rand_t(vec![2, 3], -2.0, 2.0);
    let row = rand_t(vec![3], -2.0, 2.0);
    let pos = rand_t(vec![2, 3], 0.1, 3.0);
    let pos_row = rand_t(vec![3], 0.2, 2.0);
    let m23 = rand_t(vec![2, 3], -2.0, 2.0);
    let m32 = rand_t(vec![3, 2], -2.0, 2.0);
    let sq = rand_t(vec![3, 3], -2.0, 2.0);
    // Interior of the linear region plus saturated points, all >= 1e-3
    // away from the kinks at +/-3.
    let hs = Tensor::new(
        vec![2, 3],
        vec![-2.9, -0.5, 0.0, 1.4, 2.9, 4.5],
    )?;
    let nonzero = Tensor::new(vec![2, 3], vec![-1.5, -0.3, 0.4, 0.9, -2.2, 1.1])?;
    let table = rand_t(vec![4, 3], -1.0, 1.0);

    let mut out = Vec::new();
    let mut check = |name: &'static str,
                     inputs: &[Tensor],
                     f: &dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>|
     -> Result<()> {
        let report = grad_check(f, inputs)?;
        out.push((name, report.max_rel_err));
        Ok(())
    };

    check("add", &[a.clone(), b.clone()], &|g, ids| {
        let s = g.add(ids[0], ids[1])?;
        g.sum(s)
    })?;
    check("add_broadcast", &[a.clone(), row.clone()], &|g, ids| {
        let s = g.add(ids[0], ids[1])?;
        g.sum(s)
    })?;
    check("sub", &[a.clone(), b.clone()], &|g, ids| {
        let s = g.sub(ids[0], ids[1])?;
        g.sum(s)
    })?;
    check("mul", &[a.clone(), b.clone()], &|g, ids| {
        let s = g.mul(ids[0], ids[1])?;
        g.sum(s)
    })?;
    check("div", &[a.clone(), pos_row.clone()], &|g, ids| {
        let s = g.div(ids[0], ids[1])?;
        g.sum(s)
    })?;
    check("matmul", &[m23.clone(), m32.clone()], &|g, ids| {
        let s = g.matmul(ids[0], ids[1])?;
        let s = g.mul(s, s)?;
        g.sum(s)
    })?;
    check("concat_last", &[a.clone(), b.clone()], &|g, ids| {
        let s = g.concat_last(&[ids[0], ids[1]])?;
        let s = g.mul(s, s)?;
        g.sum(s)
    })?;
    check("slice_cols", &[a.clone()], &|g, ids| {
        let s = g.slice_cols(ids[0], 1, 3)?;
        let s = g.mul(s, s)?;
        g.sum(s)
    })?;
    check("slice_rows", &[a.clone()], &|g, ids| {
        let s = g.slice_rows(ids[0], 1, 2)?;
        let s = g.mul(s, s)?;
        g.sum(s)
    })?;
    check("transpose", &[a.clone()], &|g, ids| {
        let s = g.transpose(ids[0])?;
        let s = g.mul(s, s)?;
        g.sum(s)
    })?;
    check("sum", &[a.clone()], &|g, ids| {
        let s = g.mul(ids[0], ids[0])?;
        g.sum(s)
    })?;
    check("mean", &[a.clone()], &|g, ids| {
        let s = g.mul(ids[0], ids[0])?;
        g.mean(s)
    })?;
    check("exp", &[a.clone()], &|g, ids| {
        let s = g.exp(ids[0])?;
        g.sum(s)
    })?;
    check("log", &[pos.clone()], &|g, ids| {
        let s = g.log(ids[0])?;
        g.sum(s)
    })?;
    check("relu", &[nonzero.clone()], &|g, ids| {
        let s = g.relu(ids[0])?;
        let s = g.mul(s, s)?;
        g.sum(s)
    })?;
    check("softplus", &[a.clone()], &|g, ids| {
        let s = g.softplus(ids[0])?;
        g.sum(s)
    })?;
    check("hard_sigmoid", &[hs.clone()], &|g, ids| {
        let s = g.hard_sigmoid(ids[0])?;
        let s = g.mul(s, s)?;
        g.sum(s)
    })?;
    check("sigmoid", &[a.clone()], &|g, ids| {
        let s = g.sigmoid(ids[0])?;
        g.sum(s)
    })?;
    check("tanh", &[a.clone()], &|g, ids| {
        let s = g.tanh(ids[0])?;
        g.sum(s)
    })?;
    check("abs", &[nonzero.clone()], &|g, ids| {
        let s = g.abs(ids[0])?;
        g.sum(s)
    })?;
    check("softmax_last", &[a.clone()], &|g, ids| {
        let s = g.softmax_last(ids[0])?;
        let s = g.mul(s, s)?;
        g.sum(s)
    })?;
    check("causal_softmax", &[sq.clone()], &|g, ids| {
        let s = g.causal_softmax(ids[0])?;
        let s = g.mul(s, s)?;
        g.sum(s)
    })?;
    check("layer_norm", &[a.clone(), pos_row.clone(), row.clone()], &|g, ids| {
        let s = g.layer_norm(ids[0], ids[1], ids[2])?;
        let s = g.mul(s, s)?;
        g.sum(s)
    })?;
    check("embed", &[table.clone()], &|g, ids| {
        let s = g.embed(ids[0], &[0, 2, 2, 3])?;
        let s = g.mul(s, s)?;
        g.sum(s)
    })?;
    Ok(out)
}

/// Compares the analytic gradient of a scalar-valued tensor program against
/// central finite differences at every input element. The program must be
/// deterministic (run it with dropout disabled).
pub fn grad_check<F>(program: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let run = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::eval();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let root = program(&mut g, &ids)?;
        g.value(root).item()
    };

    // Analytic pass.
    let mut g = Graph::eval();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = program(&mut g, &ids)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let x0 = input.data()[e];
            probe[k].data_mut()[e] = x0 + EPS;
            let fp = run(&probe)?;
            probe[k].data_mut()[e] = x0 - EPS;
            let fm = run(&probe)?;
            probe[k].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * EPS);
            let err = rel_err(analytic[k].data()[e], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (k, e);
            }
        }
    }
    Ok(report)
}
