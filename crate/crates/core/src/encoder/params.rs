use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayView3, Ix1, Ix2, Ix3, IxDyn};
use rand::Rng as _;

use crate::io;

/// Named parameter tensors, ordered by name. Also used for gradients and
/// optimizer moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Params {
    pub fn zeros(shapes: &[(String, Vec<usize>)]) -> Self {
        Self {
            tensors: shapes
                .iter()
                .map(|(n, s)| (n.clone(), ArrayD::zeros(IxDyn(s))))
                .collect(),
        }
    }

    pub fn zeros_like(other: &Params) -> Self {
        Self {
            tensors: other
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), ArrayD::zeros(t.raw_dim())))
                .collect(),
        }
    }

    /// Biases and layer-norm shifts start at 0, layer-norm gains at 1, every
    /// other tensor is drawn from `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    /// Each tensor has its own RNG stream derived from `(seed, name)`.
    pub fn init(shapes: &[(String, Vec<usize>)], seed: u64) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, shape) in shapes {
            let t = if name.ends_with(".gamma") {
                ArrayD::ones(IxDyn(shape))
            } else if name.ends_with(".beta") || name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2")
            {
                ArrayD::zeros(IxDyn(shape))
            } else {
                let (fan_in, fan_out) = fans(shape);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = io::rng(io::derive_seed(seed, name));
                ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-a..a))
            };
            tensors.insert(name.clone(), t);
        }
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn v1(&self, name: &str) -> ArrayView1<'_, f64> {
        self.get(name).view().into_dimensionality::<Ix1>().expect("1-d tensor")
    }

    pub fn v2(&self, name: &str) -> ArrayView2<'_, f64> {
        self.get(name).view().into_dimensionality::<Ix2>().expect("2-d tensor")
    }

    pub fn v3(&self, name: &str) -> ArrayView3<'_, f64> {
        self.get(name).view().into_dimensionality::<Ix3>().expect("3-d tensor")
    }

    /// Adds `value` into the named tensor (shapes must agree).
    pub fn accumulate<D: ndarray::Dimension>(&mut self, name: &str, value: &ndarray::Array<f64, D>) {
        let t = self.get_mut(name);
        let v = value.as_standard_layout();
        let v = v.view().into_shape_with_order(t.raw_dim()).expect("gradient shape");
        *t += &v;
    }

    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (n, t) in self.tensors.iter_mut() {
            t.scaled_add(scale, other.get(n));
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v * s);
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.values().flat_map(|t| t.iter()).map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// f32 little-endian payload of every tensor in name order.
    pub fn to_f32_bytes(&self) -> Vec<u8> {
        io::f32_le_bytes(self.tensors.values().flat_map(|t| t.iter().copied()))
    }

    /// SHA-256 over the f32 payload.
    pub fn checksum(&self) -> String {
        io::sha256_hex(&self.to_f32_bytes())
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, *n),
        [a, b] => (*a, *b),
        // conv weight [out, in, k]
        [o, i, k] => (i * k, o * k),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    }
}
