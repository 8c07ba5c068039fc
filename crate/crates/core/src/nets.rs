//! Dense tanh networks with exact input and parameter derivatives.
//!
//! One type serves every role: the policy's noise predictor (`d -> d`), the
//! residual flow-score network `g_phi` (`d -> d`), the scalar log-flow network
//! (`d -> 1`) and the pairwise correction network (`2d -> 1`). Each network
//! sees its inputs concatenated with a sinusoidal embedding of `t / T`.
//!
//! Parameters are laid out flat as `[w0, b0, w1, b1, ..., final_scale]`,
//! weights row-major with shape `(out, in)`. `final_scale` multiplies the
//! output and is trained like every other parameter, so a network started
//! at `final_scale = 0` outputs zero yet still learns.

use std::f64::consts::PI;

use crate::autodiff::{dot, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    /// Total data input width (e.g. `d`, or `2d` for pairwise nets).
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_width: usize,
    /// Number of sampling steps `T`; the embedding sees `t / T`.
    pub steps: usize,
    pub final_scale: f64,
}

impl MlpSpec {
    pub const DEFAULT_HIDDEN: [usize; 3] = [64, 64, 64];
    pub const DEFAULT_EMBED: usize = 16;

    pub fn policy(d: usize, steps: usize) -> Self {
        Self {
            input_dim: d,
            output_dim: d,
            hidden: Self::DEFAULT_HIDDEN.to_vec(),
            embed_width: Self::DEFAULT_EMBED,
            steps,
            final_scale: 1.0,
        }
    }

    /// Residual flow-score network, started near zero.
    pub fn flow_score(d: usize, steps: usize) -> Self {
        Self {
            final_scale: 1e-4,
            ..Self::policy(d, steps)
        }
    }

    pub fn scalar_flow(d: usize, steps: usize) -> Self {
        Self {
            output_dim: 1,
            final_scale: 1e-4,
            ..Self::policy(d, steps)
        }
    }

    /// `h(x_t, x_{t+1})`, started at exactly zero.
    pub fn correction(d: usize, steps: usize) -> Self {
        Self {
            input_dim: 2 * d,
            output_dim: 1,
            final_scale: 0.0,
            ..Self::policy(d, steps)
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// Row-major `(rows = out, cols = in)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Dense {
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weight
                .chunks_exact(self.cols)
                .zip(&self.bias)
                .map(|(row, b)| b + dot(row, x)),
        );
    }

    fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, gi) in self.weight.chunks_exact(self.cols).zip(g) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * gi;
            }
        }
        out
    }
}

/// Sinusoidal features of `t / T`.
pub fn time_embedding(t: usize, steps: usize, width: usize) -> Vec<f64> {
    let tau = t as f64 / steps as f64;
    let mut out = Vec::with_capacity(width);
    for k in 0..width / 2 {
        let angle = PI * (k + 1) as f64 * tau;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    if width % 2 == 1 {
        out.push(tau);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Dense>,
    final_scale: f64,
}

impl Mlp {
    fn shapes(spec: &MlpSpec) -> Vec<(usize, usize)> {
        let mut dims = vec![spec.input_dim + spec.embed_width];
        dims.extend(&spec.hidden);
        dims.push(spec.output_dim);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    /// All weights and biases zero.
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = Self::shapes(spec)
            .into_iter()
            .map(|(rows, cols)| Dense {
                weight: vec![0.0; rows * cols],
                bias: vec![0.0; rows],
                rows,
                cols,
            })
            .collect();
        Self {
            spec: spec.clone(),
            layers,
            final_scale: spec.final_scale,
        }
    }

    /// Weights `N(0, 1 / fan_in)`, zero biases.
    pub fn new(spec: &MlpSpec, rng: &mut Rng) -> Self {
        let mut net = Self::zeros(spec);
        for layer in &mut net.layers {
            let std = 1.0 / (layer.cols as f64).sqrt();
            for w in &mut layer.weight {
                *w = std * rng::normal_vec(rng, 1)[0];
            }
        }
        net
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn final_scale(&self) -> f64 {
        self.final_scale
    }

    pub fn set_final_scale(&mut self, s: f64) {
        self.final_scale = s;
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum::<usize>() + 1
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out.push(self.final_scale);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut pos = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        self.final_scale = flat[pos];
        Ok(())
    }

    /// Named arrays with shapes, for persistence.
    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), vec![l.rows, l.cols], l.weight.clone()));
            out.push((format!("layer{i}.bias"), vec![l.rows], l.bias.clone()));
        }
        out.push(("final_scale".into(), vec![1], vec![self.final_scale]));
        out
    }

    /// Inverse of [`Mlp::named_arrays`] for a network of this spec.
    pub fn from_named_arrays(spec: &MlpSpec, lookup: impl Fn(&str) -> Option<(Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let mut net = Self::zeros(spec);
        for (name, shape, _) in net.named_arrays() {
            let (got_shape, data) =
                lookup(&name).ok_or_else(|| Error::Shape(format!("missing array `{name}`")))?;
            if got_shape != shape {
                return Err(Error::Shape(format!(
                    "array `{name}` has shape {got_shape:?}, expected {shape:?}"
                )));
            }
            if name == "final_scale" {
                net.final_scale = data[0];
            } else {
                let idx: usize = name[5..name.find('.').unwrap()].parse().unwrap();
                if name.ends_with("weight") {
                    net.layers[idx].weight = data;
                } else {
                    net.layers[idx].bias = data;
                }
            }
        }
        Ok(net)
    }

    fn check_input(&self, x: &[f64]) {
        assert_eq!(
            x.len(),
            self.spec.input_dim,
            "network input has length {}, expected {}",
            x.len(),
            self.spec.input_dim
        );
    }

    fn full_input(&self, x: &[f64], t: usize) -> Vec<f64> {
        let mut input = x.to_vec();
        input.extend(time_embedding(t, self.spec.steps, self.spec.embed_width));
        input
    }

    /// First-layer bias plus the contribution of the time embedding.
    fn first_layer_const(&self, t: usize) -> Vec<f64> {
        let emb = time_embedding(t, self.spec.steps, self.spec.embed_width);
        let l = &self.layers[0];
        let d = self.spec.input_dim;
        l.weight
            .chunks_exact(l.cols)
            .zip(&l.bias)
            .map(|(row, b)| b + dot(&row[d..], &emb))
            .collect()
    }

    /// Post-activation values of every layer; the last entry is the
    /// unscaled output.
    fn activations(&self, x: &[f64], pre0: &[f64]) -> Vec<Vec<f64>> {
        let last = self.layers.len() - 1;
        let l0 = &self.layers[0];
        let mut h: Vec<f64> = l0
            .weight
            .chunks_exact(l0.cols)
            .zip(pre0)
            .map(|(row, c)| c + dot(&row[..x.len()], x))
            .collect();
        if last > 0 {
            h.iter_mut().for_each(|v| *v = v.tanh());
        }
        let mut acts = Vec::with_capacity(self.layers.len());
        acts.push(h);
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            let mut next = Vec::with_capacity(layer.rows);
            layer.apply(acts.last().unwrap(), &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(next);
        }
        acts
    }

    /// Forward evaluation.
    pub fn eval(&self, x: &[f64], t: usize) -> Vec<f64> {
        self.check_input(x);
        let pre0 = self.first_layer_const(t);
        let mut out = self.activations(x, &pre0).pop().unwrap();
        out.iter_mut().for_each(|v| *v *= self.final_scale);
        out
    }

    /// [`Mlp::eval`] on many inputs sharing one step; bit-identical to
    /// evaluating them one at a time.
    pub fn eval_batch(&self, xs: &[Vec<f64>], t: usize) -> Vec<Vec<f64>> {
        let pre0 = self.first_layer_const(t);
        xs.iter()
            .map(|x| {
                self.check_input(x);
                let mut out = self.activations(x, &pre0).pop().unwrap();
                out.iter_mut().for_each(|v| *v *= self.final_scale);
                out
            })
            .collect()
    }

    /// `J(x)ᵀ cotangent` where `J` is the Jacobian of [`Mlp::eval`] in `x`.
    pub fn vjp_input(&self, x: &[f64], t: usize, cotangent: &[f64]) -> Vec<f64> {
        self.check_input(x);
        assert_eq!(cotangent.len(), self.spec.output_dim, "cotangent length mismatch");
        let acts = self.activations(x, &self.first_layer_const(t));
        let g = self.backward_pre(&acts, cotangent, |_, _, _| {});
        let l0 = &self.layers[0];
        let mut out = vec![0.0; self.spec.input_dim];
        for (row, gi) in l0.weight.chunks_exact(l0.cols).zip(&g) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * gi;
            }
        }
        out
    }

    /// Propagate an output cotangent to the first layer's pre-activation,
    /// calling `visit(layer, grad_pre, input_act)` for every layer above it.
    fn backward_pre(&self, acts: &[Vec<f64>], cotangent: &[f64], mut visit: impl FnMut(usize, &[f64], &[f64])) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut g: Vec<f64> = cotangent.iter().map(|c| c * self.final_scale).collect();
        for i in (1..=last).rev() {
            visit(i, &g, &acts[i - 1]);
            let back = self.layers[i].apply_transpose(&g);
            g = back.iter().zip(&acts[i - 1]).map(|(gi, h)| gi * (1.0 - h * h)).collect();
        }
        g
    }

    /// Accumulate `d (cotangentᵀ eval(x, t)) / d params` into `acc` (flat
    /// layout).
    pub fn param_vjp(&self, x: &[f64], t: usize, cotangent: &[f64], acc: &mut [f64]) {
        self.check_input(x);
        assert_eq!(acc.len(), self.num_params(), "gradient buffer length mismatch");
        let acts = self.activations(x, &self.first_layer_const(t));
        let out = acts.last().unwrap();
        let n = acc.len();
        acc[n - 1] += cotangent.iter().zip(out).map(|(c, o)| c * o).sum::<f64>();
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut pos = 0;
        for l in &self.layers {
            offsets.push(pos);
            pos += l.weight.len() + l.bias.len();
        }
        let layers = &self.layers;
        let mut write = |i: usize, g: &[f64], input: &[f64]| {
            let l = &layers[i];
            let off = offsets[i];
            for (r, gi) in g.iter().enumerate() {
                let row = &mut acc[off + r * l.cols..off + (r + 1) * l.cols];
                for (a, v) in row.iter_mut().zip(input) {
                    *a += gi * v;
                }
                acc[off + l.weight.len() + r] += gi;
            }
        };
        let g0 = self.backward_pre(&acts, cotangent, &mut write);
        write(0, &g0, &self.full_input(x, t));
    }

    /// Create leaves for every parameter on `tape`.
    pub fn bind<'t>(&'t self, tape: &'t Tape) -> BoundMlp<'t> {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            weights.push(tape.var_from(&l.weight));
            biases.push(tape.var_from(&l.bias));
        }
        BoundMlp {
            net: self,
            weights,
            biases,
            scale: tape.scalar(self.final_scale),
        }
    }
}

/// An [`Mlp`] whose parameters live on a tape.
pub struct BoundMlp<'t> {
    net: &'t Mlp,
    weights: Vec<Var<'t>>,
    biases: Vec<Var<'t>>,
    scale: Var<'t>,
}

impl<'t> BoundMlp<'t> {
    pub fn net(&self) -> &'t Mlp {
        self.net
    }

    pub fn forward(&self, x: Var<'t>, t: usize) -> Var<'t> {
        self.forward_parts(&[x], t)
    }

    /// Forward pass on the concatenation of several inputs.
    pub fn forward_parts(&self, parts: &[Var<'t>], t: usize) -> Var<'t> {
        let tape = self.scale.tape();
        let spec = &self.net.spec;
        let emb = tape.var(time_embedding(t, spec.steps, spec.embed_width));
        let mut all = parts.to_vec();
        all.push(emb);
        let mut h = tape.concat(&all);
        assert_eq!(
            h.len(),
            spec.input_dim + spec.embed_width,
            "network input width mismatch"
        );
        let last = self.net.layers.len() - 1;
        for (i, layer) in self.net.layers.iter().enumerate() {
            let z = self.weights[i].matvec(h, layer.rows, layer.cols) + self.biases[i];
            h = if i < last { z.tanh() } else { z };
        }
        h.mul_scalar(self.scale)
    }

    /// Parameter leaves in flat order.
    pub fn params(&self) -> Vec<Var<'t>> {
        let mut out = Vec::with_capacity(2 * self.weights.len() + 1);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(*w);
            out.push(*b);
        }
        out.push(self.scale);
        out
    }
}

/// Concatenate per-leaf gradients into the flat parameter layout.
pub fn flatten_grads(grads: &[Var<'_>]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.value()).collect()
}

/// Exact gradient of a scalar loss built on a bound copy of `params`.
pub fn param_grad<F>(params: &Mlp, loss: F) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> Fn(&'t Tape, &BoundMlp<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let l = loss(&tape, &bound);
    let value = l.item();
    if !value.is_finite() {
        return Err(Error::Numerical {
            step: 0,
            what: format!("non-finite loss {value}"),
        });
    }
    let grads = tape.grad(l, &bound.params());
    Ok((value, flatten_grads(&grads)))
}

/// A noise-prediction model usable as a diffusion policy.
pub trait EpsModel: Send + Sync {
    fn dim(&self) -> usize;
    fn eps(&self, x: &[f64], t: usize) -> Vec<f64>;
    /// [`EpsModel::eps`] on many inputs at one step.
    fn eps_batch(&self, xs: &[Vec<f64>], t: usize) -> Vec<Vec<f64>> {
        xs.iter().map(|x| self.eps(x, t)).collect()
    }
    /// `J_eps(x)ᵀ cotangent`.
    fn eps_vjp(&self, x: &[f64], t: usize, cotangent: &[f64]) -> Vec<f64>;
    fn bind_eps<'t>(&'t self, tape: &'t Tape) -> Box<dyn EpsOnTape<'t> + 't>;
}

/// A noise-prediction model whose computation is recorded on a tape.
pub trait EpsOnTape<'t> {
    fn eps(&self, x: Var<'t>, t: usize) -> Var<'t>;
    /// Parameter leaves in flat order (empty for analytic models).
    fn params(&self) -> Vec<Var<'t>>;
}

impl EpsModel for Mlp {
    fn dim(&self) -> usize {
        self.spec.output_dim
    }

    fn eps(&self, x: &[f64], t: usize) -> Vec<f64> {
        self.eval(x, t)
    }

    fn eps_batch(&self, xs: &[Vec<f64>], t: usize) -> Vec<Vec<f64>> {
        self.eval_batch(xs, t)
    }

    fn eps_vjp(&self, x: &[f64], t: usize, cotangent: &[f64]) -> Vec<f64> {
        self.vjp_input(x, t, cotangent)
    }

    fn bind_eps<'t>(&'t self, tape: &'t Tape) -> Box<dyn EpsOnTape<'t> + 't> {
        Box::new(self.bind(tape))
    }
}

impl<'t> EpsOnTape<'t> for BoundMlp<'t> {
    fn eps(&self, x: Var<'t>, t: usize) -> Var<'t> {
        self.forward(x, t)
    }

    fn params(&self) -> Vec<Var<'t>> {
        BoundMlp::params(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn tiny_spec() -> MlpSpec {
        MlpSpec::policy(2, 10).with_hidden(vec![5, 4])
    }

    #[test]
    fn zero_weights_and_zero_scale_give_zero_output() {
        let net = Mlp::zeros(&MlpSpec::policy(2, 20));
        assert_eq!(net.eval(&[0.3, -0.7], 4), vec![0.0, 0.0]);
        let mut rng = rng::rng_from(1, &[]);
        let mut net = Mlp::new(&MlpSpec::policy(2, 20), &mut rng);
        net.set_final_scale(0.0);
        assert_eq!(net.eval(&[0.3, -0.7], 4), vec![0.0, 0.0]);
    }

    #[test]
    fn hand_computed_two_layer_output() {
        let spec = MlpSpec {
            input_dim: 1,
            output_dim: 1,
            hidden: vec![2],
            embed_width: 0,
            steps: 4,
            final_scale: 0.5,
        };
        let mut net = Mlp::zeros(&spec);
        net.layers_mut()[0].weight = vec![1.0, -2.0];
        net.layers_mut()[0].bias = vec![0.1, 0.3];
        net.layers_mut()[1].weight = vec![0.4, 0.6];
        net.layers_mut()[1].bias = vec![-0.2];
        let x = 0.25;
        let expected = 0.5 * (0.4 * (x + 0.1_f64).tanh() + 0.6 * (-2.0 * x + 0.3_f64).tanh() - 0.2);
        assert!((net.eval(&[x], 2)[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn linear_network_vjp_is_weight_transpose() {
        let spec = MlpSpec {
            input_dim: 2,
            output_dim: 2,
            hidden: vec![],
            embed_width: 2,
            steps: 4,
            final_scale: 1.0,
        };
        let mut net = Mlp::zeros(&spec);
        net.layers_mut()[0].weight = vec![1.0, 2.0, 9.0, 9.0, 3.0, 4.0, 9.0, 9.0];
        let got = net.vjp_input(&[0.5, 0.5], 1, &[1.0, -1.0]);
        assert_eq!(got, vec![1.0 - 3.0, 2.0 - 4.0]);
        assert_eq!(net.vjp_input(&[0.5, 0.5], 1, &[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = rng::rng_from(11, &[]);
        for _ in 0..10 {
            let net = Mlp::new(&tiny_spec(), &mut rng);
            let x = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let c = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let got = net.vjp_input(&x, 3, &c);
            let h = 1e-4;
            for i in 0..2 {
                let mut p = x.clone();
                let mut m = x.clone();
                p[i] += h;
                m[i] -= h;
                let f = |v: &[f64]| net.eval(v, 3).iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!((got[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "{} vs {fd}", got[i]);
            }
        }
    }

    #[test]
    fn tape_forward_and_vjp_agree_with_numeric_path() {
        let mut rng = rng::rng_from(2, &[]);
        let net = Mlp::new(&tiny_spec(), &mut rng);
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let x = tape.var(vec![0.3, -1.2]);
        let y = bound.forward(x, 7);
        for (a, b) in y.value().iter().zip(net.eval(&[0.3, -1.2], 7)) {
            assert!((a - b).abs() < 1e-14);
        }
        let c = tape.var(vec![0.5, 2.0]);
        let g = tape.vjp(y, c, &[x])[0].value();
        let n = net.vjp_input(&[0.3, -1.2], 7, &[0.5, 2.0]);
        for (a, b) in g.iter().zip(&n) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn batch_eval_is_bit_identical() {
        let mut rng = rng::rng_from(3, &[]);
        let net = Mlp::new(&tiny_spec(), &mut rng);
        let xs: Vec<Vec<f64>> = (0..7).map(|i| vec![0.1 * i as f64, -0.3]).collect();
        let batch = net.eval_batch(&xs, 4);
        for (x, b) in xs.iter().zip(&batch) {
            assert_eq!(&net.eval(x, 4), b);
        }
    }

    #[test]
    fn numeric_param_vjp_matches_tape() {
        let mut rng = rng::rng_from(8, &[]);
        for spec in [tiny_spec(), MlpSpec::correction(2, 10).with_hidden(vec![3]), tiny_spec().with_hidden(vec![])] {
            let mut net = Mlp::new(&spec, &mut rng);
            net.set_final_scale(0.8);
            let x: Vec<f64> = (0..spec.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..spec.output_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut acc = vec![0.0; net.num_params()];
            net.param_vjp(&x, 6, &c, &mut acc);
            let (_, g) = param_grad(&net, |tape, b| b.forward(tape.var_from(&x), 6).dot(tape.var_from(&c))).unwrap();
            for (a, b) in acc.iter().zip(&g) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn param_grad_contracts() {
        let mut rng = rng::rng_from(5, &[]);
        let net = Mlp::new(&tiny_spec(), &mut rng);
        let (_, g) = param_grad(&net, |tape, _| tape.scalar(3.0)).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let (v, g) = param_grad(&net, |_, b| {
            let ps = b.params();
            ps.iter().skip(1).fold(ps[0].norm_sq(), |acc, p| acc + p.norm_sq())
        })
        .unwrap();
        let flat = net.to_flat();
        assert!((v - flat.iter().map(|p| p * p).sum::<f64>()).abs() < 1e-12);
        for (a, b) in g.iter().zip(&flat) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
        let err = param_grad(&net, |tape, _| tape.scalar(f64::NAN));
        assert!(matches!(err, Err(Error::Numerical { .. })));
    }

    #[test]
    fn flat_round_trip_and_named_arrays() {
        let mut rng = rng::rng_from(9, &[]);
        let net = Mlp::new(&tiny_spec(), &mut rng);
        let mut other = Mlp::zeros(&tiny_spec());
        other.set_flat(&net.to_flat()).unwrap();
        assert_eq!(other, net);
        let arrays = net.named_arrays();
        let back = Mlp::from_named_arrays(&tiny_spec(), |name| {
            arrays
                .iter()
                .find(|(n, _, _)| n == name)
                .map(|(_, s, d)| (s.clone(), d.clone()))
        })
        .unwrap();
        assert_eq!(back, net);
        assert!(other.set_flat(&[1.0]).is_err());
    }

    #[test]
    fn tiny_init_flow_net_is_small() {
        let mut rng = rng::rng_from(4, &[]);
        let net = Mlp::new(&MlpSpec::flow_score(2, 20), &mut rng);
        for i in -4..=4 {
            for j in -4..=4 {
                let x = [i as f64, j as f64];
                for t in 0..=20 {
                    let out = net.eval(&x, t);
                    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let xn = (x[0] * x[0] + x[1] * x[1]).sqrt();
                    assert!(norm <= 1e-2 * xn + 1e-2);
                }
            }
        }
    }
}
