//! Fully connected tanh networks with analytic gradients.
//!
//! Parameters live in one flat vector so that the optimizer, gradient
//! clipping and serialization all operate on plain slices. Layer `l` stores
//! its `out x in` weight matrix row-major, followed by its `out` biases.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by [`DenseNet::forward_cached`] for backprop.
/// `layers[0]` is the input; `layers[l]` the post-activation output of layer `l`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("cache always holds the input")
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    layer_sizes: Vec<usize>,
    activation: String,
    n_params: usize,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl DenseNet {
    /// All-zero parameters.
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output sizes");
        Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        }
    }

    /// Uniform fan-in initialization; the output layer is shrunk by
    /// `output_scale` so fresh policies start near uniform.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output_scale: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes);
        let n_layers = net.n_layers();
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let mut bound = (3.0 / fan_in.max(1) as f64).sqrt();
            if l + 1 == n_layers {
                bound *= output_scale;
            }
            for w in &mut net.params[offset..offset + fan_in * fan_out] {
                *w = rng.random_range(-bound..=bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let expected = param_count(sizes);
        if sizes.len() < 2 {
            return Err(Error::Contract("network needs at least two layer sizes".into()));
        }
        if params.len() != expected {
            return Err(Error::shape("parameter vector", expected, params.len()));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_size() {
            return Err(Error::shape("network input", self.input_size(), x.len()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.layers.pop().unwrap())
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let n_layers = self.n_layers();
        let mut layers = Vec::with_capacity(n_layers + 1);
        layers.push(x.to_vec());
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let input = &layers[l];
            let last = l + 1 == n_layers;
            let out: Vec<f64> = (0..fan_out)
                .map(|j| {
                    let row = &w[j * fan_in..(j + 1) * fan_in];
                    let z = b[j] + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>();
                    if last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            layers.push(out);
            offset += fan_in * fan_out + fan_out;
        }
        Ok(ForwardCache { layers })
    }

    /// Gradients of `upstream · output` w.r.t. parameters and input.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.n_params()];
        let input_grad = self.backward_into(cache, upstream, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// As [`backward`](Self::backward) but accumulates parameter gradients
    /// into `grads`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.output_size() {
            return Err(Error::shape("upstream gradient", self.output_size(), upstream.len()));
        }
        if grads.len() != self.n_params() {
            return Err(Error::shape("gradient buffer", self.n_params(), grads.len()));
        }
        if cache.layers.len() != self.sizes.len() {
            return Err(Error::shape("forward cache", self.sizes.len(), cache.layers.len()));
        }
        let n_layers = self.n_layers();
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for l in 0..n_layers {
            offsets.push(offset);
            offset += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }

        let mut delta = upstream.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 != n_layers {
                // d tanh = 1 - tanh^2, using the stored post-activation
                for (d, a) in delta.iter_mut().zip(&cache.layers[l + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            let off = offsets[l];
            let input = &cache.layers[l];
            {
                let (gw, gb) = grads[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for j in 0..fan_out {
                    let dj = delta[j];
                    if dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj;
                    for (g, a) in gw[j * fan_in..(j + 1) * fan_in].iter_mut().zip(input) {
                        *g += dj * a;
                    }
                }
            }
            let w = &self.params[off..off + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for j in 0..fan_out {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                for (p, wij) in prev.iter_mut().zip(&w[j * fan_in..(j + 1) * fan_in]) {
                    *p += dj * wij;
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// JSON header line followed by the parameters as little-endian f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            format_version: FORMAT_VERSION,
            layer_sizes: self.sizes.clone(),
            activation: "tanh".into(),
            n_params: self.params.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse("missing network header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported network format version {}",
                header.format_version
            )));
        }
        if header.activation != "tanh" {
            return Err(Error::Parse(format!("unsupported activation {}", header.activation)));
        }
        let body = &bytes[nl + 1..];
        if body.len() != header.n_params * 8 {
            return Err(Error::shape("parameter bytes", header.n_params * 8, body.len()));
        }
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_params(&header.layer_sizes, params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}
