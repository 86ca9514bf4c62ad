use rand::Rng;

use super::params::{Layout, ParamSet};
use super::tape::{ParamVars, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Softmax,
    Sigmoid,
}

/// Fully connected network with tanh hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    widths: Vec<usize>,
    output: OutputActivation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, output: OutputActivation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("an MLP needs at least two layer widths".into()));
        }
        if widths.contains(&0) {
            return Err(Error::Config("MLP layer widths must be positive".into()));
        }
        Ok(MlpSpec { widths, output })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn output(&self) -> OutputActivation {
        self.output
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Entry names and shapes: `w0, b0, w1, b1, ...` with `w{l}` of shape
    /// `[out, in]`.
    pub fn layout(&self) -> Layout {
        let mut out = Vec::with_capacity(2 * self.layers());
        for l in 0..self.layers() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            out.push((format!("w{l}"), vec![o, i]));
            out.push((format!("b{l}"), vec![o]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        for l in 0..self.layers() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let bound = 1.0 / (i as f64).sqrt();
            p.insert(format!("w{l}"), Tensor::uniform(&[o, i], bound, rng));
            p.insert(format!("b{l}"), Tensor::uniform(&[o], bound, rng));
        }
        p
    }

    pub fn zeros(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, shape) in self.layout() {
            p.insert(name, Tensor::zeros(&shape));
        }
        p
    }

    /// Forward pass for a batch `x[n, widths[0]]` using per-layer
    /// `(weight, bias)` nodes.
    pub fn forward_layers(&self, tape: &mut Tape, layers: &[(Var, Var)], x: Var) -> Result<Var> {
        let mut h = x;
        for (l, (w, b)) in layers.iter().enumerate() {
            let width = tape.shape(h).1;
            if width != self.widths[l] {
                return Err(Error::dim(format!("mlp layer {l} input"), self.widths[l], width));
            }
            let z = tape.linear(h, *w, *b)?;
            h = if l + 1 < self.layers() {
                tape.tanh(z)
            } else {
                match self.output {
                    OutputActivation::Identity => z,
                    OutputActivation::Softmax => tape.softmax_rows(z),
                    OutputActivation::Sigmoid => tape.sigmoid(z),
                }
            };
        }
        Ok(h)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var> {
        if vars.len() != 2 * self.layers() {
            return Err(Error::dim("mlp parameter entries", 2 * self.layers(), vars.len()));
        }
        let layers: Vec<(Var, Var)> = (0..self.layers())
            .map(|l| (vars.at(2 * l), vars.at(2 * l + 1)))
            .collect();
        self.forward_layers(tape, &layers, x)
    }

    /// Views a flat parameter row (in [`Self::layout`] order) as layer nodes.
    pub fn decode_flat(&self, tape: &mut Tape, flat: Var) -> Result<Vec<(Var, Var)>> {
        let len = tape.value(flat).len();
        if len != self.param_count() {
            return Err(Error::dim("decoded parameter vector", self.param_count(), len));
        }
        let mut off = 0;
        let mut layers = Vec::with_capacity(self.layers());
        for l in 0..self.layers() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let w = tape.slice_flat(flat, off, o, i)?;
            off += o * i;
            let b = tape.slice_flat(flat, off, 1, o)?;
            off += o;
            layers.push((w, b));
        }
        Ok(layers)
    }

    /// Convenience single-sample evaluation outside of training.
    pub fn eval(&self, params: &ParamSet, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = tape.frozen(params);
        let xv = tape.row(x);
        let y = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(y).to_vec())
    }
}

/// LSTM cell with gate blocks laid out as (input, forget, cell, output).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmCellSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCellSpec {
    pub fn new(input_dim: usize, hidden_dim: usize) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(Error::Config("LSTM dimensions must be positive".into()));
        }
        Ok(LstmCellSpec {
            input_dim,
            hidden_dim,
        })
    }

    pub fn param_count(&self) -> usize {
        4 * self.hidden_dim * (self.input_dim + self.hidden_dim + 1)
    }

    pub fn layout(&self) -> Layout {
        let (i, h) = (self.input_dim, self.hidden_dim);
        vec![
            ("w_ih".into(), vec![4 * h, i]),
            ("w_hh".into(), vec![4 * h, h]),
            ("b".into(), vec![4 * h]),
        ]
    }

    /// Uniform(±1/√hidden) weights; forget-gate bias starts at 1.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let (i, h) = (self.input_dim, self.hidden_dim);
        let bound = 1.0 / (h as f64).sqrt();
        let mut p = ParamSet::new();
        p.insert("w_ih", Tensor::uniform(&[4 * h, i], bound, rng));
        p.insert("w_hh", Tensor::uniform(&[4 * h, h], bound, rng));
        let mut b = Tensor::uniform(&[4 * h], bound, rng);
        for v in &mut b.data_mut()[h..2 * h] {
            *v += 1.0;
        }
        p.insert("b", b);
        p
    }

    pub fn zeros(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, shape) in self.layout() {
            p.insert(name, Tensor::zeros(&shape));
        }
        p
    }

    /// One step for a batch: `x[n,in]`, `h,c[n,hidden]`.
    pub fn step(&self, tape: &mut Tape, vars: &ParamVars, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden_dim;
        let (_, xi) = tape.shape(x);
        if xi != self.input_dim {
            return Err(Error::dim("lstm input", self.input_dim, xi));
        }
        for (what, v) in [("lstm h", h), ("lstm c", c)] {
            let (_, w) = tape.shape(v);
            if w != hd {
                return Err(Error::dim(what, hd, w));
            }
        }
        let zx = tape.matmul_nt(x, vars.at(0))?;
        let zh = tape.matmul_nt(h, vars.at(1))?;
        let z = tape.add(zx, zh)?;
        let z = tape.add_row(z, vars.at(2))?;
        let zi = tape.slice_cols(z, 0, hd)?;
        let zf = tape.slice_cols(z, hd, hd)?;
        let zg = tape.slice_cols(z, 2 * hd, hd)?;
        let zo = tape.slice_cols(z, 3 * hd, hd)?;
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c2 = tape.add(fc, ig)?;
        let tc = tape.tanh(c2);
        let h2 = tape.mul(o, tc)?;
        Ok((h2, c2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let spec = MlpSpec::new(vec![3, 4, 2], OutputActivation::Identity).unwrap();
        let out = spec.eval(&spec.zeros(), &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer_at_origin() {
        let spec = MlpSpec::new(vec![2, 2], OutputActivation::Identity).unwrap();
        let mut p = spec.zeros();
        p.get_mut("w0").unwrap().value = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(spec.eval(&p, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn mlp_matches_straight_line_matmul_chain() {
        let spec = MlpSpec::new(vec![3, 5, 4, 2], OutputActivation::Identity).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = spec.init(&mut rng);
        let x = [0.3, -1.2, 0.8];
        let got = spec.eval(&p, &x).unwrap();
        // oracle: explicit loops
        let mut h = x.to_vec();
        for l in 0..3 {
            let w = p.value(&format!("w{l}")).unwrap();
            let b = p.value(&format!("b{l}")).unwrap();
            let (o, i) = (w.shape()[0], w.shape()[1]);
            let mut next = vec![0.0; o];
            for r in 0..o {
                let mut acc = b.data()[r];
                for c in 0..i {
                    acc += w.data()[r * i + c] * h[c];
                }
                next[r] = if l < 2 { acc.tanh() } else { acc };
            }
            h = next;
        }
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_output_is_distribution() {
        let spec = MlpSpec::new(vec![2, 3, 5], OutputActivation::Softmax).unwrap();
        let p = spec.init(&mut ChaCha8Rng::seed_from_u64(2));
        let out = spec.eval(&p, &[4.0, -7.0]).unwrap();
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn mlp_shape_error_names_layer() {
        let spec = MlpSpec::new(vec![3, 2], OutputActivation::Identity).unwrap();
        let err = spec.eval(&spec.zeros(), &[1.0]).unwrap_err();
        assert!(err.to_string().contains("mlp layer 0"), "{err}");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(MlpSpec::new(vec![3], OutputActivation::Identity).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], OutputActivation::Identity).is_err());
        assert!(LstmCellSpec::new(0, 3).is_err());
    }

    fn run_lstm(spec: &LstmCellSpec, p: &ParamSet, xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let vars = tape.frozen(p);
        let hd = spec.hidden_dim;
        let mut h = tape.constant(1, hd, vec![0.0; hd]);
        let mut c = tape.constant(1, hd, vec![0.0; hd]);
        for x in xs {
            let xv = tape.row(x);
            let (h2, c2) = spec.step(&mut tape, &vars, xv, h, c).unwrap();
            h = h2;
            c = c2;
        }
        (tape.value(h).to_vec(), tape.value(c).to_vec())
    }

    #[test]
    fn lstm_param_count_formula() {
        let spec = LstmCellSpec::new(7, 5).unwrap();
        let p = spec.init(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.num_values(), 4 * 5 * (7 + 5 + 1));
        assert_eq!(spec.param_count(), p.num_values());
    }

    #[test]
    fn zero_lstm_gives_zero_hidden() {
        let spec = LstmCellSpec::new(3, 4).unwrap();
        let (h, _) = run_lstm(&spec, &spec.zeros(), &[vec![1.0, 2.0, -3.0]]);
        assert_eq!(h, vec![0.0; 4]);
    }

    #[test]
    fn lstm_matches_gate_by_gate_unroll() {
        let spec = LstmCellSpec::new(3, 2).unwrap();
        let p = spec.init(&mut ChaCha8Rng::seed_from_u64(5));
        let xs = vec![vec![0.5, -0.1, 0.2], vec![0.0, 1.0, -1.0], vec![0.3, 0.3, 0.9]];
        let (h_got, c_got) = run_lstm(&spec, &p, &xs);

        let wih = p.value("w_ih").unwrap().data();
        let whh = p.value("w_hh").unwrap().data();
        let b = p.value("b").unwrap().data();
        let (n_in, hd) = (3, 2);
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        for x in &xs {
            let pre = |gate: usize, k: usize| {
                let row = gate * hd + k;
                let mut acc = b[row];
                for j in 0..n_in {
                    acc += wih[row * n_in + j] * x[j];
                }
                for j in 0..hd {
                    acc += whh[row * hd + j] * h[j];
                }
                acc
            };
            let mut h_new = vec![0.0; hd];
            let mut c_new = vec![0.0; hd];
            for k in 0..hd {
                let ig = sigmoid(pre(0, k));
                let fg = sigmoid(pre(1, k));
                let gg = pre(2, k).tanh();
                let og = sigmoid(pre(3, k));
                c_new[k] = fg * c[k] + ig * gg;
                h_new[k] = og * c_new[k].tanh();
            }
            h = h_new;
            c = c_new;
        }
        for k in 0..hd {
            assert!((h[k] - h_got[k]).abs() < 1e-12);
            assert!((c[k] - c_got[k]).abs() < 1e-12);
        }
        // determinism
        let again = run_lstm(&spec, &p, &xs);
        assert_eq!(again.0, h_got);
        assert_eq!(again.1, c_got);
    }
}
