//! Mixture-of-Agents gating: a small MLP maps the channel-concatenated agent
//! contributions to per-row convex weights, and the fused output is the
//! weighted sum of the contributions. Also the two ablation fusions,
//! element-wise averaging and summing per-agent losses.

use ndarray::Array2;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::seed;

/// One-hidden-layer gate: `softmax(tanh(X·W1 + b1)·W2 + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateNetwork {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub trainable: bool,
}

/// Per-row agent weights and the fused contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    /// `N×A`, rows on the probability simplex.
    pub weights: Array2<f64>,
    pub fused: Array2<f64>,
}

impl GateNetwork {
    /// Seeded hidden layer, zero output layer. A fresh gate therefore returns
    /// uniform weights, identical across agents.
    pub fn new(input_width: usize, hidden: usize, agents: usize, seed: u64) -> Result<Self> {
        if agents == 0 || input_width == 0 || hidden == 0 {
            return Err(invalid("gate needs positive input, hidden and output widths"));
        }
        let mut rng = seed::rng(seed, "gate/w1");
        Ok(Self {
            w1: seed::normal_matrix(&mut rng, input_width, hidden, 1.0 / (input_width as f64).sqrt()),
            b1: Array2::zeros((1, hidden)),
            w2: Array2::zeros((hidden, agents)),
            b2: Array2::zeros((1, agents)),
            trainable: true,
        })
    }

    /// Like [`GateNetwork::new`] but with a random output layer too.
    pub fn randomized(input_width: usize, hidden: usize, agents: usize, seed: u64) -> Result<Self> {
        let mut gate = Self::new(input_width, hidden, agents, seed)?;
        let mut rng = seed::rng(seed, "gate/rest");
        gate.b1 = seed::normal_matrix(&mut rng, 1, hidden, 0.1);
        gate.w2 = seed::normal_matrix(&mut rng, hidden, agents, 1.0 / (hidden as f64).sqrt());
        gate.b2 = seed::normal_matrix(&mut rng, 1, agents, 0.1);
        Ok(gate)
    }

    pub fn input_width(&self) -> usize {
        self.w1.nrows()
    }

    pub fn agents(&self) -> usize {
        self.w2.ncols()
    }

    /// Insert the parameters into `g`, tracked iff the gate is trainable.
    pub fn load(&self, g: &mut Graph) -> GateVars {
        let mut leaf = |m: &Array2<f64>| {
            if self.trainable {
                g.param(m.clone())
            } else {
                g.constant(m.clone())
            }
        };
        GateVars {
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
        }
    }

    pub fn params_mut(&mut self) -> [&mut Array2<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn params(&self) -> [&Array2<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

/// Gate parameters inside a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl GateVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

fn check_inputs(shapes: &[(usize, usize)]) -> Result<()> {
    let first = *shapes.first().ok_or_else(|| invalid("no agent inputs"))?;
    if let Some((i, s)) = shapes.iter().enumerate().find(|(_, &s)| s != first) {
        return Err(invalid(format!(
            "agent {i} has shape {s:?}, expected {first:?}"
        )));
    }
    Ok(())
}

/// Graph form of [`moa_gate`]. Returns `(weights, fused)`.
pub fn moa_gate_graph(g: &mut Graph, inputs: &[Var], gate: &GateVars) -> Result<(Var, Var)> {
    let shapes: Vec<_> = inputs.iter().map(|&v| g.shape(v)).collect();
    check_inputs(&shapes)?;
    let concat_width: usize = shapes.iter().map(|s| s.1).sum();
    let (in_w, _) = g.shape(gate.w1);
    if concat_width != in_w {
        return Err(invalid(format!(
            "concatenated width {concat_width} does not match gate input width {in_w}"
        )));
    }
    if g.shape(gate.w2).1 != inputs.len() {
        return Err(invalid("gate output width differs from agent count"));
    }
    let x = g.concat_cols(inputs);
    let h = g.matmul(x, gate.w1);
    let h = g.add_row(h, gate.b1);
    let h = g.tanh(h);
    let logits = g.matmul(h, gate.w2);
    let logits = g.add_row(logits, gate.b2);
    let weights = g.softmax(logits);
    let mut fused = g.scale_rows_by_col(inputs[0], weights, 0);
    for (i, &inp) in inputs.iter().enumerate().skip(1) {
        let term = g.scale_rows_by_col(inp, weights, i);
        fused = g.add(fused, term);
    }
    Ok((weights, fused))
}

/// Gate `inputs` (one equal-shaped matrix per agent) with `gate`.
pub fn moa_gate(inputs: &[Array2<f64>], gate: &GateNetwork) -> Result<GateOutput> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.constant(m.clone())).collect();
    let gv = GateNetwork { trainable: false, ..gate.clone() }.load(&mut g);
    let (w, f) = moa_gate_graph(&mut g, &vars, &gv)?;
    Ok(GateOutput {
        weights: g.value(w).clone(),
        fused: g.value(f).clone(),
    })
}

pub fn fuse_average_graph(g: &mut Graph, inputs: &[Var]) -> Result<Var> {
    let shapes: Vec<_> = inputs.iter().map(|&v| g.shape(v)).collect();
    check_inputs(&shapes)?;
    let mut acc = inputs[0];
    for &v in &inputs[1..] {
        acc = g.add(acc, v);
    }
    Ok(g.scale(acc, 1.0 / inputs.len() as f64))
}

/// Element-wise mean across agents.
pub fn fuse_average(inputs: &[Array2<f64>]) -> Result<Array2<f64>> {
    let shapes: Vec<_> = inputs.iter().map(|m| m.dim()).collect();
    check_inputs(&shapes)?;
    let mut acc = inputs[0].clone();
    for m in &inputs[1..] {
        acc += m;
    }
    Ok(acc / inputs.len() as f64)
}

/// Sum of independently computed per-agent losses.
pub fn fuse_add_losses(per_agent: &[f64]) -> Result<f64> {
    if let Some(bad) = per_agent.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite agent loss {bad}")));
    }
    Ok(per_agent.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_mat(seed: u64, r: usize, c: usize) -> Array2<f64> {
        let mut rng = seed::rng(seed, "test/gate");
        seed::normal_matrix(&mut rng, r, c, 1.0)
    }

    #[test]
    fn single_agent_is_identity() {
        let x = rand_mat(1, 4, 3);
        let gate = GateNetwork::randomized(3, 5, 1, 2).unwrap();
        let out = moa_gate(std::slice::from_ref(&x), &gate).unwrap();
        assert!(out.weights.iter().all(|&w| w == 1.0));
        assert_eq!(out.fused, x);
    }

    #[test]
    fn identical_inputs_fuse_to_themselves() {
        let x = rand_mat(3, 4, 3);
        let gate = GateNetwork::randomized(9, 5, 3, 4).unwrap();
        let out = moa_gate(&[x.clone(), x.clone(), x.clone()], &gate).unwrap();
        for (a, b) in out.fused.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_agents_match_manual_weighted_sum() {
        let x1 = rand_mat(5, 3, 4);
        let x2 = rand_mat(6, 3, 4);
        let gate = GateNetwork::randomized(8, 6, 2, 7).unwrap();
        let out = moa_gate(&[x1.clone(), x2.clone()], &gate).unwrap();

        // Hand-written forward of the MLP and the weighted sum.
        for n in 0..3 {
            let input: Vec<f64> = x1.row(n).iter().chain(x2.row(n).iter()).copied().collect();
            let hidden: Vec<f64> = (0..6)
                .map(|h| {
                    let z: f64 = (0..8).map(|i| input[i] * gate.w1[[i, h]]).sum::<f64>() + gate.b1[[0, h]];
                    z.tanh()
                })
                .collect();
            let logits: Vec<f64> = (0..2)
                .map(|a| (0..6).map(|h| hidden[h] * gate.w2[[h, a]]).sum::<f64>() + gate.b2[[0, a]])
                .collect();
            let m = logits[0].max(logits[1]);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let w1 = e[0] / (e[0] + e[1]);
            let w2 = e[1] / (e[0] + e[1]);
            for c in 0..4 {
                let expected = w1 * x1[[n, c]] + w2 * x2[[n, c]];
                assert!((out.fused[[n, c]] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fresh_gate_is_uniform() {
        let x = rand_mat(8, 5, 2);
        let y = rand_mat(9, 5, 2);
        let gate = GateNetwork::new(4, 3, 2, 1).unwrap();
        let out = moa_gate(&[x, y], &gate).unwrap();
        assert!(out.weights.iter().all(|&w| (w - 0.5).abs() < 1e-15));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let gate = GateNetwork::new(5, 3, 2, 1).unwrap();
        let r = moa_gate(&[rand_mat(1, 2, 3), rand_mat(2, 2, 2)], &gate);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
        assert!(matches!(moa_gate(&[], &gate), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn average_fusion() {
        let x = rand_mat(1, 3, 3);
        assert_eq!(fuse_average(std::slice::from_ref(&x)).unwrap(), x);
        let z = fuse_average(&[x.clone(), -&x]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let ms = [rand_mat(2, 3, 3), rand_mat(3, 3, 3), rand_mat(4, 3, 3)];
        let avg = fuse_average(&ms).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let mut s = 0.0;
                for m in &ms {
                    s += m[[r, c]];
                }
                assert!((avg[[r, c]] - s / 3.0).abs() < 1e-15);
            }
        }
        assert!(fuse_average(&[]).is_err());
    }

    #[test]
    fn add_losses() {
        assert_eq!(fuse_add_losses(&[0.7]).unwrap(), 0.7);
        assert_eq!(fuse_add_losses(&[0.0, 0.0]).unwrap(), 0.0);
        let l = [0.25, 1.5, 3.125];
        assert_eq!(fuse_add_losses(&l).unwrap(), 0.25 + 1.5 + 3.125);
    }
}
