//! Dense ReLU networks and the two coordinate networks built on them.

use super::tape::{Matrix, ParamId, Tape, Var};
use super::NeuralError;
use nalgebra::{Vector3, Vector4};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Parameter ids are `slot * SLOT_STRIDE + 2 * layer + {0 weight, 1 bias}`.
pub const SLOT_STRIDE: u32 = 64;

pub const DEFAULT_HIDDEN: [usize; 3] = [64, 64, 64];
pub const DEFAULT_BANDS_X: usize = 6;
pub const DEFAULT_BANDS_T: usize = 4;
pub const DEFAULT_W_TRANS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in × out`
    pub weight: Matrix,
    /// `1 × out`
    pub bias: Matrix,
}

/// ReLU after every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    layers: Vec<Dense>,
}

fn snap(m: &mut Matrix) {
    m.mapv_inplace(|x| x as f32 as f64);
}

impl Mlp {
    /// He-uniform weights from `seed`, zero biases. With `zero_output` the
    /// last layer starts at exactly zero.
    pub fn new(dims: &[usize], seed: u64, zero_output: bool) -> Result<Self, NeuralError> {
        if dims.len() < 2 || dims.contains(&0) || dims.len() > (SLOT_STRIDE / 2) as usize {
            return Err(NeuralError::Dims(dims.to_vec()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let bound = (6.0 / w[0] as f64).sqrt();
                let mut weight = Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-bound..bound));
                if zero_output && l == last {
                    weight.fill(0.0);
                }
                snap(&mut weight);
                Dense {
                    weight,
                    bias: Matrix::zeros((1, w[1])),
                }
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self, NeuralError> {
        let mut dims = Vec::with_capacity(layers.len() + 1);
        for (l, d) in layers.iter().enumerate() {
            if l == 0 {
                dims.push(d.weight.nrows());
            }
            if d.weight.nrows() != *dims.last().unwrap() || d.bias.dim() != (1, d.weight.ncols()) {
                return Err(NeuralError::Dims(dims));
            }
            dims.push(d.weight.ncols());
        }
        if layers.is_empty() {
            return Err(NeuralError::Dims(dims));
        }
        let mlp = Self { dims, layers };
        if !mlp.parameters().all(f64::is_finite) {
            return Err(NeuralError::NonFinite);
        }
        Ok(mlp)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Parameters in layer order, weight row-major then bias.
    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|d| d.weight.iter().chain(d.bias.iter()).copied())
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<(), NeuralError> {
        if values.len() != self.param_count() {
            return Err(NeuralError::ParamCount {
                expected: self.param_count(),
                actual: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for d in &mut self.layers {
            for x in d.weight.iter_mut().chain(d.bias.iter_mut()) {
                *x = it.next().unwrap();
            }
        }
        Ok(())
    }

    /// Tensors paired with their tape ids under `slot`.
    pub fn tensors(&self, slot: u32) -> Vec<(ParamId, &Matrix)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, d)| {
                let base = slot * SLOT_STRIDE + 2 * l as u32;
                [(ParamId(base), &d.weight), (ParamId(base + 1), &d.bias)]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self, slot: u32) -> Vec<(ParamId, &mut Matrix)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(l, d)| {
                let base = slot * SLOT_STRIDE + 2 * l as u32;
                [(ParamId(base), &mut d.weight), (ParamId(base + 1), &mut d.bias)]
            })
            .collect()
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn snap_to_storage(&mut self) {
        for d in &mut self.layers {
            snap(&mut d.weight);
            snap(&mut d.bias);
        }
    }

    pub fn forward(&self, tape: &mut Tape, input: Var, slot: u32) -> Var {
        let mut h = input;
        let last = self.layers.len() - 1;
        for (l, d) in self.layers.iter().enumerate() {
            let base = slot * SLOT_STRIDE + 2 * l as u32;
            let w = tape.param(ParamId(base), d.weight.clone());
            let b = tape.param(ParamId(base + 1), d.bias.clone());
            let z = tape.matmul(h, w);
            h = tape.add_row(z, b);
            if l != last {
                h = tape.relu(h);
            }
        }
        h
    }
}

/// Encoded input width for `(x, t, q)` with the given band counts.
pub fn feature_width(bands_x: usize, bands_t: usize) -> usize {
    3 * (1 + 2 * bands_x) + (1 + 2 * bands_t) + 4
}

/// `PE(x) ++ PE(t) ++ q` per row.
fn featurize(tape: &mut Tape, x: Var, q: Var, t: Var, bands_x: usize, bands_t: usize) -> Var {
    let ex = tape.positional_encode(x, bands_x);
    let et = tape.positional_encode(t, bands_t);
    tape.concat_cols(&[ex, et, q])
}

fn point_inputs(tape: &mut Tape, x: &Vector3<f64>, q: &Vector4<f64>, t: f64) -> (Var, Var, Var) {
    let xv = tape.constant(Matrix::from_shape_vec((1, 3), x.iter().copied().collect()).unwrap());
    let qv = tape.constant(Matrix::from_shape_vec((1, 4), q.iter().copied().collect()).unwrap());
    let tv = tape.constant(Matrix::from_elem((1, 1), t));
    (xv, qv, tv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetShape {
    pub hidden: Vec<usize>,
    pub bands_x: usize,
    pub bands_t: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN.to_vec(),
            bands_x: DEFAULT_BANDS_X,
            bands_t: DEFAULT_BANDS_T,
        }
    }
}

impl NetShape {
    fn dims(&self, out: usize) -> Vec<usize> {
        let mut dims = vec![feature_width(self.bands_x, self.bands_t)];
        dims.extend(&self.hidden);
        dims.push(out);
        dims
    }
}

/// Maps `(x, q, t)` to `(Δx, Δq)`. Quaternions are `(w, x, y, z)` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationNet {
    pub mlp: Mlp,
    pub bands_x: usize,
    pub bands_t: usize,
}

impl DeformationNet {
    pub const OUTPUT: usize = 7;

    pub fn new(shape: &NetShape, seed: u64) -> Self {
        Self::with_init(shape, seed, true)
    }

    /// `zero_output = false` gives a non-identity net, used by gradient tests.
    pub fn with_init(shape: &NetShape, seed: u64, zero_output: bool) -> Self {
        Self {
            mlp: Mlp::new(&shape.dims(Self::OUTPUT), seed, zero_output).expect("valid shape"),
            bands_x: shape.bands_x,
            bands_t: shape.bands_t,
        }
    }

    /// Batched form: `x` is N×3, `q` N×4, `t` N×1. Returns (N×3, N×4).
    pub fn forward(&self, tape: &mut Tape, x: Var, q: Var, t: Var, slot: u32) -> (Var, Var) {
        let f = featurize(tape, x, q, t, self.bands_x, self.bands_t);
        let out = self.mlp.forward(tape, f, slot);
        (tape.slice_cols(out, 0, 3), tape.slice_cols(out, 3, 4))
    }

    pub fn deform(&self, x: &Vector3<f64>, q: &Vector4<f64>, t: f64) -> (Vector3<f64>, Vector4<f64>) {
        let mut tape = Tape::new();
        let (xv, qv, tv) = point_inputs(&mut tape, x, q, t);
        let (dx, dq) = self.forward(&mut tape, xv, qv, tv, 0);
        let dx = tape.value(dx);
        let dq = tape.value(dq);
        (
            Vector3::new(dx[[0, 0]], dx[[0, 1]], dx[[0, 2]]),
            Vector4::new(dq[[0, 0]], dq[[0, 1]], dq[[0, 2]], dq[[0, 3]]),
        )
    }
}

pub fn prob_from_head(h: f64, w_trans: f64) -> f64 {
    let z = w_trans * h;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `p = σ(w_trans · h(x, q, t))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionNet {
    pub mlp: Mlp,
    pub bands_x: usize,
    pub bands_t: usize,
    pub w_trans: f64,
}

impl TransitionNet {
    pub fn new(shape: &NetShape, w_trans: f64, seed: u64) -> Result<Self, NeuralError> {
        Self::with_init(shape, w_trans, seed, true)
    }

    pub fn with_init(
        shape: &NetShape,
        w_trans: f64,
        seed: u64,
        zero_output: bool,
    ) -> Result<Self, NeuralError> {
        if !(w_trans >= 1.0 && w_trans.is_finite()) {
            return Err(NeuralError::WTrans(w_trans));
        }
        Ok(Self {
            mlp: Mlp::new(&shape.dims(1), seed, zero_output)?,
            bands_x: shape.bands_x,
            bands_t: shape.bands_t,
            w_trans,
        })
    }

    /// Batched head `h`, N×1.
    pub fn head(&self, tape: &mut Tape, x: Var, q: Var, t: Var, slot: u32) -> Var {
        let f = featurize(tape, x, q, t, self.bands_x, self.bands_t);
        self.mlp.forward(tape, f, slot)
    }

    /// Batched probabilities, N×1.
    pub fn forward(&self, tape: &mut Tape, x: Var, q: Var, t: Var, slot: u32) -> Var {
        let h = self.head(tape, x, q, t, slot);
        let z = tape.scale(h, self.w_trans);
        tape.sigmoid(z)
    }

    pub fn transition_prob(&self, x: &Vector3<f64>, q: &Vector4<f64>, t: f64) -> f64 {
        let mut tape = Tape::new();
        let (xv, qv, tv) = point_inputs(&mut tape, x, q, t);
        let h = self.head(&mut tape, xv, qv, tv, 0);
        prob_from_head(tape.value(h)[[0, 0]], self.w_trans)
    }
}

/// All networks of a scene: one deformation net per object and one
/// transition net per transition pair (or a single shared one).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneNets {
    pub deform: Vec<DeformationNet>,
    pub transition: Vec<TransitionNet>,
    pub shared_transition: bool,
}

impl SceneNets {
    pub fn new(
        objects: usize,
        pairs: usize,
        shared_transition: bool,
        shape: &NetShape,
        w_trans: f64,
        seed: u64,
    ) -> Result<Self, NeuralError> {
        let deform = (0..objects)
            .map(|i| DeformationNet::new(shape, seed.wrapping_add(i as u64)))
            .collect();
        let count = if shared_transition { pairs.min(1) } else { pairs };
        let transition = (0..count)
            .map(|k| TransitionNet::new(shape, w_trans, seed.wrapping_add(1000 + k as u64)))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            deform,
            transition,
            shared_transition,
        })
    }

    pub fn deform_slot(&self, object: usize) -> u32 {
        object as u32
    }

    pub fn transition_index(&self, pair: usize) -> usize {
        if self.shared_transition {
            0
        } else {
            pair
        }
    }

    pub fn transition_slot(&self, pair: usize) -> u32 {
        (self.deform.len() + self.transition_index(pair)) as u32
    }

    pub fn transition_for(&self, pair: usize) -> &TransitionNet {
        &self.transition[self.transition_index(pair)]
    }

    pub fn param_count(&self) -> usize {
        self.mlps().map(Mlp::param_count).sum()
    }

    pub fn mlps(&self) -> impl Iterator<Item = &Mlp> {
        self.deform
            .iter()
            .map(|n| &n.mlp)
            .chain(self.transition.iter().map(|n| &n.mlp))
    }

    /// Every tensor with its tape id.
    pub fn tensors(&self) -> Vec<(ParamId, &Matrix)> {
        let mut out = Vec::new();
        for (slot, mlp) in self.mlps().enumerate() {
            out.extend(mlp.tensors(slot as u32));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamId, &mut Matrix)> {
        let mut out = Vec::new();
        let mlps = self
            .deform
            .iter_mut()
            .map(|n| &mut n.mlp)
            .chain(self.transition.iter_mut().map(|n| &mut n.mlp));
        for (slot, mlp) in mlps.enumerate() {
            out.extend(mlp.tensors_mut(slot as u32));
        }
        out
    }

    pub fn snap_to_storage(&mut self) {
        for n in &mut self.deform {
            n.mlp.snap_to_storage();
        }
        for n in &mut self.transition {
            n.mlp.snap_to_storage();
        }
    }

    /// sha256 over the `f32` bytes of every parameter.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for mlp in self.mlps() {
            for x in mlp.parameters() {
                h.update((x as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_q() -> Vector4<f64> {
        Vector4::new(1.0, 0.0, 0.0, 0.0)
    }

    #[test]
    fn fresh_deformation_is_identity() {
        let net = DeformationNet::new(&NetShape::default(), 3);
        for (x, t) in [(Vector3::new(0.3, -0.2, 0.9), 0.0), (Vector3::new(-5.0, 2.0, 1.0), 0.77)] {
            let q = Vector4::new(0.5, 0.5, -0.5, 0.5);
            let (dx, dq) = net.deform(&x, &q, t);
            assert_eq!(dx, Vector3::zeros());
            assert_eq!(dq, Vector4::zeros());
        }
        assert_eq!(net.mlp.dims(), &[52, 64, 64, 64, 7]);
    }

    #[test]
    fn fresh_transition_is_half() {
        for w in [1.0, 10.0, 55.0] {
            let net = TransitionNet::new(&NetShape::default(), w, 1).unwrap();
            for t in [0.0, 0.3, 1.0] {
                assert_eq!(net.transition_prob(&Vector3::new(0.1, 0.2, 0.3), &unit_q(), t), 0.5);
            }
        }
    }

    #[test]
    fn head_sigmoid_value() {
        assert!((prob_from_head(0.2, 10.0) - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn probability_is_monotone_in_head() {
        let mut prev = 0.0;
        for k in -50..=50 {
            let p = prob_from_head(k as f64 * 0.05, 10.0);
            assert!(p > prev && p > 0.0 && p < 1.0);
            prev = p;
        }
    }

    #[test]
    fn w_trans_below_one_rejected() {
        assert!(matches!(
            TransitionNet::new(&NetShape::default(), 0.5, 0),
            Err(NeuralError::WTrans(_))
        ));
    }

    #[test]
    fn bad_dims_rejected() {
        assert!(Mlp::new(&[3], 0, true).is_err());
        assert!(Mlp::new(&[3, 0, 2], 0, true).is_err());
    }

    #[test]
    fn parameters_are_f32_representable_and_seeded() {
        let a = DeformationNet::with_init(&NetShape::default(), 9, false);
        let b = DeformationNet::with_init(&NetShape::default(), 9, false);
        assert_eq!(a, b);
        assert!(a.mlp.parameters().all(|x| x as f32 as f64 == x));
        let mut flat: Vec<f64> = a.mlp.parameters().collect();
        assert_eq!(flat.len(), a.mlp.param_count());
        flat[0] = 0.25;
        let mut c = a.clone();
        c.mlp.set_parameters(&flat).unwrap();
        assert_eq!(c.mlp.layers()[0].weight[[0, 0]], 0.25);
    }

    #[test]
    fn scene_nets_slots() {
        let nets = SceneNets::new(3, 2, false, &NetShape::default(), 10.0, 0).unwrap();
        assert_eq!(nets.transition_slot(1), 4);
        let shared = SceneNets::new(3, 2, true, &NetShape::default(), 10.0, 0).unwrap();
        assert_eq!(shared.transition.len(), 1);
        assert_eq!(shared.transition_slot(1), 3);
        assert_eq!(nets.tensors().len(), 5 * 8);
    }

    /// Batched deformation gradients against central differences (h = 1e-4).
    #[test]
    fn deformation_gradients_match_finite_differences() {
        let shape = NetShape {
            hidden: vec![8, 8],
            bands_x: 2,
            bands_t: 1,
        };
        let net = DeformationNet::with_init(&shape, 5, false);
        let x = Matrix::from_shape_fn((4, 3), |(r, c)| 0.1 * (r as f64) - 0.2 * c as f64 + 0.05);
        let q = Matrix::from_shape_fn((4, 4), |(r, c)| if c == 0 { 0.9 } else { 0.1 * r as f64 });
        let t = Matrix::from_shape_fn((4, 1), |(r, _)| r as f64 / 3.0);
        let loss_of = |n: &DeformationNet, tape: &mut Tape| {
            let (xv, qv, tv) = (tape.constant(x.clone()), tape.constant(q.clone()), tape.constant(t.clone()));
            let (dx, dq) = n.forward(tape, xv, qv, tv, 0);
            let both = tape.concat_cols(&[dx, dq]);
            tape.sum_squares(both)
        };
        let mut tape = Tape::new();
        let loss = loss_of(&net, &mut tape);
        let grads = tape.backward(loss).unwrap();
        let base: Vec<f64> = net.mlp.parameters().collect();
        let analytic: Vec<f64> = net
            .mlp
            .tensors(0)
            .iter()
            .flat_map(|(id, _)| grads.param(*id).unwrap().iter().copied().collect::<Vec<_>>())
            .collect();
        let h = 1e-4;
        for k in 0..base.len() {
            let eval = |delta: f64| {
                let mut n = net.clone();
                let mut p = base.clone();
                p[k] += delta;
                n.mlp.set_parameters(&p).unwrap();
                let mut tape = Tape::new();
                let l = loss_of(&n, &mut tape);
                tape.value(l)[[0, 0]]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let g = analytic[k];
            assert!(
                (g - fd).abs() <= (1e-3 * g.abs().max(fd.abs())).max(1e-5),
                "param {k}: {g} vs {fd}"
            );
        }
    }
}
