use crate::error::{Error, Result};

/// Dense row-major array of `f64`. Activations are rank 4 and indexed
/// `(channel, z, y, x)`; parameters may have any rank.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Single-channel activation from a `(D, H, W)` block.
    pub fn from_volume_data(dims: [usize; 3], data: Vec<f64>) -> Self {
        assert_eq!(data.len(), dims.iter().product::<usize>());
        Tensor { shape: vec![1, dims[0], dims[1], dims[2]], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `(C, D, H, W)` of a rank-4 activation.
    pub fn dims4(&self) -> [usize; 4] {
        match self.shape[..] {
            [c, d, h, w] => [c, d, h, w],
            _ => panic!("expected rank-4 tensor, got shape {:?}", self.shape),
        }
    }

    /// Spatial dims of a rank-4 activation.
    pub fn spatial(&self) -> [usize; 3] {
        let [_, d, h, w] = self.dims4();
        [d, h, w]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "elementwise op on mismatched shapes");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One channel of a rank-4 activation as a `(1, D, H, W)` tensor.
    pub fn channel(&self, c: usize) -> Tensor {
        let [_, d, h, w] = self.dims4();
        let n = d * h * w;
        Tensor { shape: vec![1, d, h, w], data: self.data[c * n..(c + 1) * n].to_vec() }
    }

    /// Concatenates rank-4 activations along the channel axis.
    pub fn concat(parts: &[&Tensor]) -> Tensor {
        let [_, d, h, w] = parts[0].dims4();
        let mut data = Vec::new();
        let mut c = 0;
        for p in parts {
            assert_eq!(p.spatial(), [d, h, w], "concat of mismatched spatial dims");
            c += p.dims4()[0];
            data.extend_from_slice(&p.data);
        }
        Tensor { shape: vec![c, d, h, w], data }
    }

    /// Even and odd samples along the z axis.
    pub fn split_z(&self) -> (Tensor, Tensor) {
        let [c, d, h, w] = self.dims4();
        let half = d / 2;
        let plane = h * w;
        let mut even = Tensor::zeros(&[c, half, h, w]);
        let mut odd = Tensor::zeros(&[c, half, h, w]);
        for ch in 0..c {
            for z in 0..half {
                let src_e = (ch * d + 2 * z) * plane;
                let src_o = src_e + plane;
                let dst = (ch * half + z) * plane;
                even.data[dst..dst + plane].copy_from_slice(&self.data[src_e..src_e + plane]);
                odd.data[dst..dst + plane].copy_from_slice(&self.data[src_o..src_o + plane]);
            }
        }
        (even, odd)
    }

    /// Interleaves `even` and `odd` along z; inverse of [`Tensor::split_z`].
    pub fn merge_z(even: &Tensor, odd: &Tensor) -> Tensor {
        let [c, half, h, w] = even.dims4();
        assert_eq!(even.shape, odd.shape, "merge of mismatched halves");
        let plane = h * w;
        let d = 2 * half;
        let mut out = Tensor::zeros(&[c, d, h, w]);
        for ch in 0..c {
            for z in 0..half {
                let src = (ch * half + z) * plane;
                let dst_e = (ch * d + 2 * z) * plane;
                out.data[dst_e..dst_e + plane].copy_from_slice(&even.data[src..src + plane]);
                out.data[dst_e + plane..dst_e + 2 * plane].copy_from_slice(&odd.data[src..src + plane]);
            }
        }
        out
    }

    /// Permutes the three spatial axes: output axis `i` is input axis `perm[i]`.
    pub fn permute_spatial(&self, perm: [usize; 3]) -> Tensor {
        let [c, d, h, w] = self.dims4();
        let src_dims = [d, h, w];
        let src_strides = [h * w, w, 1];
        let out_dims = perm.map(|p| src_dims[p]);
        let strides = perm.map(|p| src_strides[p]);
        let n = d * h * w;
        let mut data = Vec::with_capacity(self.data.len());
        for ch in 0..c {
            let base = ch * n;
            for a in 0..out_dims[0] {
                for b in 0..out_dims[1] {
                    let off = base + a * strides[0] + b * strides[1];
                    for x in 0..out_dims[2] {
                        data.push(self.data[off + x * strides[2]]);
                    }
                }
            }
        }
        Tensor { shape: vec![c, out_dims[0], out_dims[1], out_dims[2]], data }
    }
}

/// Inverse of a spatial permutation.
pub fn invert_perm(perm: [usize; 3]) -> [usize; 3] {
    let mut inv = [0; 3];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
