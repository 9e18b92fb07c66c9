//! Embedding parameterizations: a free per-sample table and a dense ReLU
//! network, with manual reverse-mode gradients and a flat binary checkpoint.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::EmbeddingSet;

const MAGIC: &[u8; 8] = b"EPSENC01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    FreeTable,
    Mlp,
}

/// Encoder parameters stored as a list of matrices.
///
/// * free table: `[table]` with `table` of shape `n × m`.
/// * mlp: `[W1, b1, W2, b2, …]` with `W` of shape `out × in` and `b` of shape
///   `1 × out`.
///
/// `generation` increases whenever parameters are handed out mutably, so a
/// cached forward pass can tell whether it is stale.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    variant: EncoderVariant,
    dims: Vec<usize>,
    tensors: Vec<Array2<f64>>,
    generation: u64,
}

impl EncoderParams {
    pub fn variant(&self) -> EncoderVariant {
        self.variant
    }

    /// `[n, m]` for the table, layer widths `[d_in, …, m]` for the mlp.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        self.generation += 1;
        &mut self.tensors
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Free table from explicit coordinates.
    pub fn from_table(table: Array2<f64>) -> Result<Self> {
        let dims = vec![table.nrows(), table.ncols()];
        Self::from_tensors(EncoderVariant::FreeTable, dims, vec![table])
    }

    pub fn from_tensors(variant: EncoderVariant, dims: Vec<usize>, tensors: Vec<Array2<f64>>) -> Result<Self> {
        let expected = shapes(variant, &dims)?;
        if expected.len() != tensors.len() {
            return Err(Error::Shape {
                expected: format!("{} tensors", expected.len()),
                actual: tensors.len().to_string(),
            });
        }
        for (t, &(r, c)) in tensors.iter().zip(&expected) {
            if t.dim() != (r, c) {
                return Err(Error::Shape {
                    expected: format!("{r}×{c}"),
                    actual: format!("{}×{}", t.nrows(), t.ncols()),
                });
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite parameter"));
            }
        }
        Ok(Self {
            variant,
            dims,
            tensors: tensors.into_iter().map(|t| t.as_standard_layout().into_owned()).collect(),
            generation: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 8 * self.num_params());
        buf.extend_from_slice(MAGIC);
        buf.push(match self.variant {
            EncoderVariant::FreeTable => 0,
            EncoderVariant::Mlp => 1,
        });
        buf.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for t in &self.tensors {
            for v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| Error::io(path, e))?;
        let fmt = |message: &str| Error::Format { path: path.to_path_buf(), message: message.to_string() };
        if buf.len() < 13 || &buf[..8] != MAGIC {
            return Err(fmt("not an encoder checkpoint"));
        }
        let variant = match buf[8] {
            0 => EncoderVariant::FreeTable,
            1 => EncoderVariant::Mlp,
            _ => return Err(fmt("unknown encoder variant")),
        };
        let ndims = u32::from_le_bytes(buf[9..13].try_into().unwrap()) as usize;
        let mut pos = 13;
        if buf.len() < pos + 8 * ndims {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: (pos + 8 * ndims) as u64,
                actual: buf.len() as u64,
            });
        }
        let dims: Vec<usize> = (0..ndims)
            .map(|k| u64::from_le_bytes(buf[pos + 8 * k..pos + 8 * k + 8].try_into().unwrap()) as usize)
            .collect();
        pos += 8 * ndims;
        let shapes = shapes(variant, &dims)?;
        let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
        let expected = (pos + 8 * total) as u64;
        if buf.len() as u64 != expected {
            return Err(Error::Truncated { path: path.to_path_buf(), expected, actual: buf.len() as u64 });
        }
        let mut tensors = Vec::with_capacity(shapes.len());
        for (r, c) in shapes {
            let vals: Vec<f64> =
                buf[pos..pos + 8 * r * c].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            pos += 8 * r * c;
            tensors.push(Array2::from_shape_vec((r, c), vals).unwrap());
        }
        Self::from_tensors(variant, dims, tensors)
    }
}

fn shapes(variant: EncoderVariant, dims: &[usize]) -> Result<Vec<(usize, usize)>> {
    if dims.contains(&0) {
        return Err(Error::invalid(format!("zero-width dimension in {dims:?}")));
    }
    match variant {
        EncoderVariant::FreeTable => {
            if dims.len() != 2 {
                return Err(Error::invalid(format!("free table needs dims [n, m], got {dims:?}")));
            }
            Ok(vec![(dims[0], dims[1])])
        }
        EncoderVariant::Mlp => {
            if dims.len() < 2 {
                return Err(Error::invalid(format!("mlp needs at least input and output widths, got {dims:?}")));
            }
            Ok(dims.windows(2).flat_map(|w| [(w[1], w[0]), (1, w[1])]).collect())
        }
    }
}

/// Free table: `N(0, 1)·0.1` coordinates. Mlp: weights uniform in
/// `±sqrt(6/(fan_in + fan_out))`, zero biases.
pub fn init_params(variant: EncoderVariant, dims: &[usize], seed: u64) -> Result<EncoderParams> {
    let shapes = shapes(variant, dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = match variant {
        EncoderVariant::FreeTable => {
            let (n, m) = shapes[0];
            vec![Array2::from_shape_simple_fn((n, m), || 0.1 * rng.sample::<f64, _>(StandardNormal))]
        }
        EncoderVariant::Mlp => shapes
            .iter()
            .enumerate()
            .map(|(k, &(r, c))| {
                if k % 2 == 1 {
                    Array2::zeros((r, c))
                } else {
                    let bound = (6.0 / (r + c) as f64).sqrt();
                    Array2::from_shape_simple_fn((r, c), || rng.random_range(-bound..=bound))
                }
            })
            .collect(),
    };
    EncoderParams::from_tensors(variant, dims.to_vec(), tensors)
}

#[derive(Debug, Clone, Copy)]
pub enum Inputs<'a> {
    /// Sample indices into a free table.
    Indices(&'a [usize]),
    /// One row per sample for the mlp.
    Features(ArrayView2<'a, f64>),
}

/// State needed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    indices: Vec<usize>,
    /// Input of every layer (mlp only); entry 0 is the feature batch.
    layer_inputs: Vec<Array2<f64>>,
}

pub fn forward(params: &EncoderParams, inputs: Inputs<'_>) -> Result<(EmbeddingSet, ForwardCache)> {
    match (params.variant, inputs) {
        (EncoderVariant::FreeTable, Inputs::Indices(idx)) => {
            let table = &params.tensors[0];
            for &i in idx {
                if i >= table.nrows() {
                    return Err(Error::IndexOutOfRange { index: i, len: table.nrows() });
                }
            }
            let out = table.select(Axis(0), idx);
            let cache = ForwardCache { generation: params.generation, indices: idx.to_vec(), layer_inputs: Vec::new() };
            Ok((EmbeddingSet::new(out)?, cache))
        }
        (EncoderVariant::Mlp, Inputs::Features(x)) => {
            if x.ncols() != params.dims[0] {
                return Err(Error::Shape {
                    expected: format!("{} input features", params.dims[0]),
                    actual: x.ncols().to_string(),
                });
            }
            let layers = params.tensors.len() / 2;
            let mut layer_inputs = Vec::with_capacity(layers);
            let mut h = x.to_owned();
            for l in 0..layers {
                let (w, b) = (&params.tensors[2 * l], &params.tensors[2 * l + 1]);
                let mut z = h.dot(&w.t()) + b;
                if l + 1 < layers {
                    z.mapv_inplace(|v| v.max(0.0));
                }
                layer_inputs.push(std::mem::replace(&mut h, z));
            }
            let cache = ForwardCache { generation: params.generation, indices: Vec::new(), layer_inputs };
            Ok((EmbeddingSet::new(h)?, cache))
        }
        (EncoderVariant::FreeTable, Inputs::Features(_)) => Err(Error::invalid("free table expects sample indices")),
        (EncoderVariant::Mlp, Inputs::Indices(_)) => Err(Error::invalid("mlp expects a feature matrix")),
    }
}

/// Forward pass when no gradient is needed.
pub fn embed(params: &EncoderParams, inputs: Inputs<'_>) -> Result<EmbeddingSet> {
    forward(params, inputs).map(|(e, _)| e)
}

/// Gradients w.r.t. every parameter tensor, in the order of
/// [`EncoderParams::tensors`].
pub fn backward(params: &EncoderParams, cache: &ForwardCache, grad_emb: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
    if cache.generation != params.generation {
        return Err(Error::StaleForward { cached: cache.generation, current: params.generation });
    }
    match params.variant {
        EncoderVariant::FreeTable => {
            let table = &params.tensors[0];
            if grad_emb.dim() != (cache.indices.len(), table.ncols()) {
                return Err(grad_shape(cache.indices.len(), table.ncols(), grad_emb));
            }
            let mut g = Array2::zeros(table.dim());
            for (r, &i) in cache.indices.iter().enumerate() {
                let mut row = g.row_mut(i);
                row += &grad_emb.row(r);
            }
            Ok(vec![g])
        }
        EncoderVariant::Mlp => {
            let layers = params.tensors.len() / 2;
            let batch = cache.layer_inputs[0].nrows();
            if grad_emb.dim() != (batch, params.out_dim()) {
                return Err(grad_shape(batch, params.out_dim(), grad_emb));
            }
            let mut grads = vec![Array2::zeros((0, 0)); 2 * layers];
            let mut g = grad_emb.clone();
            for l in (0..layers).rev() {
                let h = &cache.layer_inputs[l];
                grads[2 * l] = g.t().dot(h);
                grads[2 * l + 1] = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                if l > 0 {
                    let mut gh = g.dot(&params.tensors[2 * l]);
                    // ReLU: the stored input of layer l is the rectified output of layer l − 1.
                    ndarray::Zip::from(&mut gh).and(h).for_each(|gv, &hv| {
                        if hv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    g = gh;
                }
            }
            Ok(grads)
        }
    }
}

fn grad_shape(rows: usize, cols: usize, g: &Array2<f64>) -> Error {
    Error::Shape {
        expected: format!("{rows}×{cols} embedding gradient"),
        actual: format!("{}×{}", g.nrows(), g.ncols()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{proptest, ProptestConfig};
    use rand::Rng;

    #[test]
    fn init_shapes_and_determinism() {
        let a = init_params(EncoderVariant::Mlp, &[784, 128, 2], 7).unwrap();
        let shapes: Vec<_> = a.tensors().iter().map(|t| t.dim()).collect();
        assert_eq!(shapes, vec![(128, 784), (1, 128), (2, 128), (1, 2)]);
        assert_eq!(a, init_params(EncoderVariant::Mlp, &[784, 128, 2], 7).unwrap());
        let t = init_params(EncoderVariant::FreeTable, &[4, 2], 1).unwrap();
        assert_eq!(t.tensors()[0].dim(), (4, 2));
        assert!(t.tensors()[0].iter().all(|v| v.is_finite()));
        assert!(init_params(EncoderVariant::Mlp, &[3, 0, 2], 1).is_err());
    }

    #[test]
    fn table_lookup_and_scatter() {
        let p = EncoderParams::from_table(array![[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]]).unwrap();
        let (e, cache) = forward(&p, Inputs::Indices(&[2, 0])).unwrap();
        assert_eq!(e.coords(), &array![[4.0, 5.0], [0.0, 1.0]]);
        let g = backward(&p, &cache, &array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(g[0], array![[3.0, 4.0], [0.0, 0.0], [1.0, 2.0]]);
        let (_, cache) = forward(&p, Inputs::Indices(&[1, 1])).unwrap();
        let g = backward(&p, &cache, &array![[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert_eq!(g[0].row(1).to_vec(), vec![2.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let dims = vec![3, 4, 2];
        let tensors = vec![Array2::zeros((4, 3)), Array2::zeros((1, 4)), Array2::zeros((2, 4)), array![[0.5, -1.0]]];
        let p = EncoderParams::from_tensors(EncoderVariant::Mlp, dims, tensors).unwrap();
        let x = array![[1.0, 2.0, 3.0], [-1.0, 0.0, 9.0]];
        let (e, cache) = forward(&p, Inputs::Features(x.view())).unwrap();
        assert_eq!(e.coords(), &array![[0.5, -1.0], [0.5, -1.0]]);
        let g = backward(&p, &cache, &Array2::zeros((2, 2))).unwrap();
        assert!(g.iter().all(|t| t.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn relu_blocks_negative() {
        let tensors = vec![array![[-1.0], [-2.0]], array![[0.0, 0.0]], array![[1.0, 1.0]], array![[0.0]]];
        let p = EncoderParams::from_tensors(EncoderVariant::Mlp, vec![1, 2, 1], tensors).unwrap();
        let x = array![[3.0]];
        let (e, cache) = forward(&p, Inputs::Features(x.view())).unwrap();
        assert_eq!(e.coords()[[0, 0]], 0.0);
        assert_eq!(cache.layer_inputs[1], array![[0.0, 0.0]]);
    }

    #[test]
    fn stale_forward_rejected() {
        let mut p = init_params(EncoderVariant::FreeTable, &[3, 2], 0).unwrap();
        let (_, cache) = forward(&p, Inputs::Indices(&[0])).unwrap();
        p.tensors_mut()[0][[0, 0]] += 1.0;
        assert!(matches!(backward(&p, &cache, &Array2::zeros((1, 2))), Err(Error::StaleForward { .. })));
    }

    #[test]
    fn wrong_inputs_rejected() {
        let p = init_params(EncoderVariant::Mlp, &[3, 2], 0).unwrap();
        assert!(forward(&p, Inputs::Features(Array2::zeros((1, 4)).view())).is_err());
        assert!(forward(&p, Inputs::Indices(&[0])).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        let p = init_params(EncoderVariant::Mlp, &[5, 3, 2], 3).unwrap();
        p.save(&path).unwrap();
        assert_eq!(EncoderParams::load(&path).unwrap(), p);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(EncoderParams::load(&path), Err(Error::Truncated { .. })));
    }

    fn fd_check(seed: u64, dims: &[usize], batch: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = init_params(EncoderVariant::Mlp, dims, seed).unwrap();
        for t in p.tensors_mut() {
            t.mapv_inplace(|v| v + 0.05 * rng.sample::<f64, _>(StandardNormal));
        }
        let x = Array2::from_shape_simple_fn((batch, dims[0]), || rng.sample::<f64, _>(StandardNormal));
        let w = Array2::from_shape_simple_fn((batch, *dims.last().unwrap()), || rng.sample::<f64, _>(StandardNormal));
        // L = Σ w ⊙ f(x), so dL/dEmb = w.
        let loss = |p: &EncoderParams| (&embed(p, Inputs::Features(x.view())).unwrap().coords() * &w).sum();
        let (_, cache) = forward(&p, Inputs::Features(x.view())).unwrap();
        let grads = backward(&p, &cache, &w).unwrap();
        let h = 1e-6;
        for (ti, g) in grads.iter().enumerate() {
            for idx in 0..g.len() {
                let (r, c) = (idx / g.ncols(), idx % g.ncols());
                let mut plus = p.clone();
                plus.tensors_mut()[ti][[r, c]] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[ti][[r, c]] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = g[[r, c]];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(err <= 1e-5, "tensor {ti} [{r},{c}]: analytic {an} vs fd {fd}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn mlp_gradients_match_finite_differences(seed in 0u64..10_000, hidden in 2usize..6, batch in 1usize..4) {
            fd_check(seed, &[3, hidden, 4, 2], batch);
        }
    }
}
