//! Shared helpers for integration tests: random differentiable programs and
//! small training setups.

#![allow(dead_code)]

use fieldmeta::graph::{Array, NodeId, Tape};
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
enum Instr {
    Input(usize),
    Const(Array),
    Sine(usize),
    Cosine(usize),
    Sigmoid(usize),
    Square(usize),
    Scale(usize, f64),
    Shift(usize, f64),
    Transpose(usize),
    Column(usize),
    SumRows(usize),
    Broadcast(usize, usize),
    Fill(usize, Vec<usize>),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    MulScalar(usize, usize),
    /// Divides by `1 + s²`, which never vanishes.
    DivScalar(usize, usize),
    Concat(usize, usize),
    Slice(usize, usize, usize),
    Pad(usize, usize, usize),
    Sum(usize),
    Mean(usize),
    /// Norm of `x` shifted away from the origin.
    Norm(usize),
}

/// A randomly generated smooth scalar program over a few matrix inputs.
///
/// With `second_order` set, the objective is `Σ (∂f/∂x)²` for the first input,
/// which puts the vjp of every vjp on the checked path.
#[derive(Clone, Debug)]
pub struct RandomProgram {
    pub inputs: Vec<Array>,
    instrs: Vec<Instr>,
    pub second_order: bool,
}

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    ArrayD::from_shape_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

impl RandomProgram {
    pub fn generate(seed: u64, second_order: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut instrs = Vec::new();
        let mut shapes: Vec<Vec<usize>> = Vec::new();
        let mut inputs = Vec::new();
        let n_inputs = rng.gen_range(1..=3);
        for i in 0..n_inputs {
            let shape = vec![rng.gen_range(1..=3), rng.gen_range(1..=4)];
            inputs.push(rand_array(&mut rng, &shape));
            instrs.push(Instr::Input(i));
            shapes.push(shape);
        }
        let n_ops = rng.gen_range(3..=10);
        for _ in 0..n_ops {
            let a = rng.gen_range(0..shapes.len());
            let sa = shapes[a].clone();
            let partner = |rng: &mut ChaCha8Rng, want: &[usize]| {
                let same: Vec<usize> = (0..shapes.len()).filter(|&i| shapes[i] == want).collect();
                same[rng.gen_range(0..same.len())]
            };
            let scalar = (0..shapes.len()).find(|&i| shapes[i].is_empty());
            let (instr, shape) = match (rng.gen_range(0..21), sa.len()) {
                (0, _) => (Instr::Sine(a), sa),
                (1, _) => (Instr::Cosine(a), sa),
                (2, _) => (Instr::Sigmoid(a), sa),
                (3, _) => (Instr::Square(a), sa),
                (4, _) => (Instr::Scale(a, rng.gen_range(-2.0..2.0)), sa),
                (5, _) => (Instr::Shift(a, rng.gen_range(-1.0..1.0)), sa),
                (6, _) => (Instr::Add(a, partner(&mut rng, &sa)), sa),
                (7, _) => (Instr::Sub(a, partner(&mut rng, &sa)), sa),
                (8, _) => (Instr::Mul(a, partner(&mut rng, &sa)), sa),
                (9, 2) => (Instr::Transpose(a), vec![sa[1], sa[0]]),
                (10, 2) => (Instr::SumRows(a), vec![sa[1]]),
                (10, 1) => {
                    let rows = rng.gen_range(1..=3);
                    (Instr::Broadcast(a, rows), vec![rows, sa[0]])
                }
                (11, 2) => {
                    let n = rng.gen_range(1..=3);
                    let c = rand_array(&mut rng, &[sa[1], n]);
                    instrs.push(Instr::Const(c));
                    shapes.push(vec![sa[1], n]);
                    (Instr::MatMul(a, shapes.len() - 1), vec![sa[0], n])
                }
                (12, 2) => {
                    let w = rng.gen_range(1..=3);
                    let c = rand_array(&mut rng, &[sa[0], w]);
                    instrs.push(Instr::Const(c));
                    shapes.push(vec![sa[0], w]);
                    (Instr::Concat(a, shapes.len() - 1), vec![sa[0], sa[1] + w])
                }
                (13, 2) => {
                    let s = rng.gen_range(0..sa[1]);
                    let e = rng.gen_range(s + 1..=sa[1]);
                    (Instr::Slice(a, s, e), vec![sa[0], e - s])
                }
                (14, 2) => {
                    let start = rng.gen_range(0..=2);
                    let total = sa[1] + start + rng.gen_range(0..=2);
                    (Instr::Pad(a, start, total), vec![sa[0], total])
                }
                (15, 2) => (Instr::Column(a), vec![sa[0] * sa[1], 1]),
                (16, _) => (Instr::Sum(a), vec![]),
                (17, _) => (Instr::Mean(a), vec![]),
                (18, _) => (Instr::Norm(a), vec![]),
                (19, _) => match scalar {
                    Some(s) if rng.gen_bool(0.5) => (Instr::MulScalar(a, s), sa),
                    Some(s) => (Instr::DivScalar(a, s), sa),
                    None => (Instr::Sum(a), vec![]),
                },
                (20, _) => match scalar {
                    Some(s) => (Instr::Fill(s, vec![2, 2]), vec![2, 2]),
                    None => (Instr::Mean(a), vec![]),
                },
                _ => (Instr::Sine(a), sa),
            };
            instrs.push(instr);
            shapes.push(shape);
        }
        RandomProgram {
            inputs,
            instrs,
            second_order,
        }
    }

    /// Builds the program; returns the scalar objective.
    pub fn build(&self, tape: &mut Tape, inputs: &[NodeId]) -> NodeId {
        let f = self.build_first(tape, inputs);
        if !self.second_order {
            return f;
        }
        let g = tape.grad(f, &inputs[..1]).unwrap()[0];
        let sq = tape.square(g).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.add(s, f).unwrap()
    }

    fn build_first(&self, tape: &mut Tape, inputs: &[NodeId]) -> NodeId {
        let mut n: Vec<NodeId> = Vec::with_capacity(self.instrs.len());
        for instr in &self.instrs {
            let id = match instr {
                Instr::Input(i) => Ok(inputs[*i]),
                Instr::Const(c) => Ok(tape.constant(c.clone())),
                Instr::Sine(a) => tape.sine(n[*a]),
                Instr::Cosine(a) => tape.cosine(n[*a]),
                Instr::Sigmoid(a) => tape.sigmoid(n[*a]),
                Instr::Square(a) => tape.square(n[*a]),
                Instr::Scale(a, c) => tape.scale(n[*a], *c),
                Instr::Shift(a, c) => tape.shift(n[*a], *c),
                Instr::Transpose(a) => tape.transpose(n[*a]),
                Instr::Column(a) => {
                    let s = tape.shape(n[*a]).unwrap().to_vec();
                    tape.reshape(n[*a], &[s[0] * s[1], 1])
                }
                Instr::SumRows(a) => tape.sum_rows(n[*a]),
                Instr::Broadcast(a, r) => tape.broadcast(n[*a], *r),
                Instr::Fill(a, s) => tape.fill(n[*a], s),
                Instr::Add(a, b) => tape.add(n[*a], n[*b]),
                Instr::Sub(a, b) => tape.sub(n[*a], n[*b]),
                Instr::Mul(a, b) => tape.mul(n[*a], n[*b]),
                Instr::MatMul(a, b) => tape.matmul(n[*a], n[*b]),
                Instr::MulScalar(a, s) => tape.mul_scalar(n[*a], n[*s]),
                Instr::DivScalar(a, s) => {
                    let sq = tape.square(n[*s]).unwrap();
                    let d = tape.shift(sq, 1.0).unwrap();
                    tape.div_scalar(n[*a], d)
                }
                Instr::Concat(a, b) => tape.concat(&[n[*a], n[*b]]),
                Instr::Slice(a, s, e) => tape.slice_cols(n[*a], *s, *e),
                Instr::Pad(a, s, t) => tape.pad_cols(n[*a], *s, *t),
                Instr::Sum(a) => tape.sum(n[*a]),
                Instr::Mean(a) => tape.mean(n[*a]),
                Instr::Norm(a) => {
                    let s = tape.shift(n[*a], 2.0).unwrap();
                    tape.norm2(s)
                }
            };
            n.push(id.unwrap());
        }
        // Every node feeds the objective so that no instruction is dead code.
        let mut total: Option<NodeId> = None;
        for (i, &id) in n.iter().enumerate() {
            let s = tape.sine(id).unwrap();
            let w = tape.scale(s, 1.0 / (i + 1) as f64).unwrap();
            let part = tape.sum(w).unwrap();
            total = Some(match total {
                Some(t) => tape.add(t, part).unwrap(),
                None => part,
            });
        }
        total.unwrap()
    }

    pub fn value(&self, inputs: &[Array]) -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|a| tape.parameter(a.clone())).collect();
        let f = self.build(&mut tape, &ids);
        tape.evaluate_scalar(f).unwrap()
    }

    pub fn gradient(&self) -> Vec<Array> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = self.inputs.iter().map(|a| tape.parameter(a.clone())).collect();
        let f = self.build(&mut tape, &ids);
        let g = tape.grad(f, &ids).unwrap();
        g.into_iter().map(|id| tape.evaluate(id).unwrap().clone()).collect()
    }

    /// Central differences with step `h`.
    pub fn numeric_gradient(&self, h: f64) -> Vec<Array> {
        let mut out = Vec::new();
        for i in 0..self.inputs.len() {
            let mut g = Array::zeros(self.inputs[i].raw_dim());
            for j in 0..self.inputs[i].len() {
                let mut plus = self.inputs.clone();
                let mut minus = self.inputs.clone();
                plus[i].as_slice_mut().unwrap()[j] += h;
                minus[i].as_slice_mut().unwrap()[j] -= h;
                g.as_slice_mut().unwrap()[j] = (self.value(&plus) - self.value(&minus)) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    /// `‖g_ad − g_fd‖ / max(‖g_ad‖, ‖g_fd‖, 1e-6)` over all inputs.
    pub fn relative_error(&self) -> f64 {
        let ad = self.gradient();
        let fd = self.numeric_gradient(1e-5);
        let flat = |v: &[Array]| v.iter().flat_map(|a| a.iter().copied()).collect::<Vec<f64>>();
        let (a, b) = (flat(&ad), flat(&fd));
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-6)
    }
}
