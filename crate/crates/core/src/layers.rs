//! Network building blocks on top of the tape: linear maps, GRUs, the strided
//! convolution stack and the vector quantizer.
//!
//! Sequences are batch-major, `[B, T, F]`. Parameter names follow
//! `<module>.<layer>.<param>`.

use crate::numerics::{NumericsError, ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore<f32>, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Result<Self, NumericsError> {
        Ok(Self {
            w: store.add_uniform(&format!("{name}.w"), &[in_dim, out_dim], in_dim, rng)?,
            b: store.add_zeros(&format!("{name}.b"), &[out_dim])?,
            in_dim,
            out_dim,
        })
    }

    /// Applies to the last axis of `x`, any rank ≥ 2.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var, NumericsError> {
        let shape = tape.shape(x).to_vec();
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        if shape.len() == 2 {
            let y = tape.matmul(x, w)?;
            return tape.add(y, b);
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let flat = tape.reshape(x, &[rows, *shape.last().unwrap_or(&0)])?;
        let y = tape.matmul(flat, w)?;
        let y = tape.add(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        tape.reshape(y, &out_shape)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
    Bi,
}

impl Direction {
    pub fn count(self) -> usize {
        if self == Direction::Bi {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Debug)]
struct GruWeights {
    wx: ParamId,
    bx: ParamId,
    wh: ParamId,
    bh: ParamId,
    reverse: bool,
}

#[derive(Clone, Debug)]
pub struct GruLayer {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub direction: Direction,
    dirs: Vec<GruWeights>,
}

pub struct GruOutput {
    /// `[B, T, H·directions]`, forward direction first.
    pub outputs: Var,
    /// Final state of each direction (`[B, H]`); for the backward
    /// direction this is the state after reading step 0.
    pub finals: Vec<Var>,
}

impl GruLayer {
    pub fn new(
        store: &mut ParamStore<f32>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        direction: Direction,
        rng: &mut Rng,
    ) -> Result<Self, NumericsError> {
        let mut dirs = Vec::new();
        let tags: &[(&str, bool)] = match direction {
            Direction::Forward => &[("fwd", false)],
            Direction::Backward => &[("bwd", true)],
            Direction::Bi => &[("fwd", false), ("bwd", true)],
        };
        let g3 = 3 * hidden_dim;
        for &(tag, reverse) in tags {
            dirs.push(GruWeights {
                wx: store.add_uniform(&format!("{name}.{tag}.wx"), &[input_dim, g3], hidden_dim, rng)?,
                bx: store.add_zeros(&format!("{name}.{tag}.bx"), &[g3])?,
                wh: store.add_uniform(&format!("{name}.{tag}.wh"), &[hidden_dim, g3], hidden_dim, rng)?,
                bh: store.add_zeros(&format!("{name}.{tag}.bh"), &[g3])?,
                reverse,
            });
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            direction,
            dirs,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.hidden_dim * self.direction.count()
    }

    fn zeros<T: Scalar>(&self, tape: &mut Tape<'_, T>, batch: usize) -> Result<Var, NumericsError> {
        tape.input(Tensor::zeros(&[batch, self.hidden_dim]))
    }

    /// Run over `x: [B, T, F]`. `h0` holds one `[B, H]` state per direction,
    /// or is empty for zero initial states.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, h0: &[Var]) -> Result<GruOutput, NumericsError> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input_dim || shape[1] == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "gru",
                left: shape,
                right: vec![self.input_dim],
            });
        }
        if !h0.is_empty() && h0.len() != self.dirs.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "gru h0",
                left: vec![h0.len()],
                right: vec![self.dirs.len()],
            });
        }
        let (batch, steps) = (shape[0], shape[1]);
        let mut per_dir = Vec::with_capacity(self.dirs.len());
        let mut finals = Vec::with_capacity(self.dirs.len());
        for (d, wts) in self.dirs.iter().enumerate() {
            let (wx, bx) = (tape.param(wts.wx), tape.param(wts.bx));
            let (wh, bh) = (tape.param(wts.wh), tape.param(wts.bh));
            let flat = tape.reshape(x, &[batch * steps, self.input_dim])?;
            let xg = tape.matmul(flat, wx)?;
            let xg = tape.add(xg, bx)?;
            let xg = tape.reshape(xg, &[batch, steps, 3 * self.hidden_dim])?;
            let mut h = match h0.get(d) {
                Some(&h) => h,
                None => self.zeros(tape, batch)?,
            };
            let mut outs = vec![h; steps];
            for k in 0..steps {
                let t = if wts.reverse { steps - 1 - k } else { k };
                let xt = tape.select(xg, 1, t)?;
                h = tape.gru_cell(xt, h, wh, bh)?;
                outs[t] = h;
            }
            finals.push(h);
            per_dir.push(tape.stack(&outs, 1)?);
        }
        let outputs = if per_dir.len() == 1 { per_dir[0] } else { tape.concat(&per_dir, 2)? };
        Ok(GruOutput { outputs, finals })
    }

    /// One step of a forward-direction layer: `x: [B, F]`, `h: [B, H]`.
    pub fn step<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, h: Var) -> Result<Var, NumericsError> {
        let wts = &self.dirs[0];
        let (wx, bx) = (tape.param(wts.wx), tape.param(wts.bx));
        let (wh, bh) = (tape.param(wts.wh), tape.param(wts.bh));
        let xg = tape.matmul(x, wx)?;
        let xg = tape.add(xg, bx)?;
        tape.gru_cell(xg, h, wh, bh)
    }
}

/// Stacked GRU layers; layer `l > 0` reads the outputs of layer `l - 1`.
#[derive(Clone, Debug)]
pub struct GruStack {
    pub layers: Vec<GruLayer>,
}

impl GruStack {
    pub fn new(
        store: &mut ParamStore<f32>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        direction: Direction,
        rng: &mut Rng,
    ) -> Result<Self, NumericsError> {
        let mut layers = Vec::with_capacity(num_layers);
        let mut dim = input_dim;
        for l in 0..num_layers {
            let layer = GruLayer::new(store, &format!("{name}.l{l}"), dim, hidden_dim, direction, rng)?;
            dim = layer.out_dim();
            layers.push(layer);
        }
        Ok(Self { layers })
    }

    /// Number of initial states: layers × directions.
    pub fn num_states(&self) -> usize {
        self.layers.iter().map(|l| l.direction.count()).sum()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].hidden_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, GruLayer::out_dim)
    }

    /// `h0` is empty or has [`Self::num_states`] entries, layer-major.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, h0: &[Var]) -> Result<GruOutput, NumericsError> {
        let mut input = x;
        let mut finals = Vec::new();
        let mut offset = 0;
        for layer in &self.layers {
            let n = layer.direction.count();
            let init = if h0.is_empty() { &[][..] } else { &h0[offset..offset + n] };
            offset += n;
            let out = layer.forward(tape, input, init)?;
            input = out.outputs;
            finals.extend(out.finals);
        }
        Ok(GruOutput { outputs: input, finals })
    }

    /// One step through every (forward) layer; `h` is updated in place.
    pub fn step<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, h: &mut [Var]) -> Result<Var, NumericsError> {
        let mut input = x;
        for (layer, state) in self.layers.iter().zip(h.iter_mut()) {
            *state = layer.step(tape, input, *state)?;
            input = *state;
        }
        Ok(input)
    }
}

/// Learned map from a conditioning vector to a set of initial GRU states:
/// `tanh(W c + b)`, split into `count` chunks of `hidden_dim`.
#[derive(Clone, Debug)]
pub struct HiddenInit {
    pub linear: Linear,
    pub count: usize,
    pub hidden_dim: usize,
}

impl HiddenInit {
    pub fn new(store: &mut ParamStore<f32>, name: &str, cond_dim: usize, count: usize, hidden_dim: usize, rng: &mut Rng) -> Result<Self, NumericsError> {
        Ok(Self {
            linear: Linear::new(store, name, cond_dim, count * hidden_dim, rng)?,
            count,
            hidden_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, cond: Var) -> Result<Vec<Var>, NumericsError> {
        let y = self.linear.forward(tape, cond)?;
        let y = tape.tanh(y)?;
        (0..self.count)
            .map(|k| tape.slice(y, 1, k * self.hidden_dim, (k + 1) * self.hidden_dim))
            .collect()
    }
}

pub const CONV_KERNEL: usize = 4;
/// (stride, pad_left, pad_right) of the three encoder convolutions; the
/// decoder uses the same triples in reverse as (stride, crop_left, crop_right).
pub const CONV_GEOMETRY: [(usize, usize, usize); 3] = [(2, 1, 1), (2, 1, 1), (1, 2, 1)];
pub const SEQ_LEN: usize = 32;
pub const CODE_LEN: usize = 8;

#[derive(Clone, Debug)]
struct ConvWeights {
    w: ParamId,
    b: ParamId,
}

/// Three strided convolutions taking `[B, 32, C]` to `[B, 8, D]`.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    layers: Vec<ConvWeights>,
}

impl ConvEncoder {
    /// `channels = [C, c1, c2, D]`.
    pub fn new(store: &mut ParamStore<f32>, name: &str, channels: [usize; 4], rng: &mut Rng) -> Result<Self, NumericsError> {
        let mut layers = Vec::new();
        for l in 0..3 {
            let (cin, cout) = (channels[l], channels[l + 1]);
            layers.push(ConvWeights {
                w: store.add_uniform(&format!("{name}.conv{l}.w"), &[CONV_KERNEL, cin, cout], CONV_KERNEL * cin, rng)?,
                b: store.add_zeros(&format!("{name}.conv{l}.b"), &[cout])?,
            });
        }
        Ok(Self { layers })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var, NumericsError> {
        if tape.shape(x).len() != 3 || tape.shape(x)[1] != SEQ_LEN {
            return Err(NumericsError::ShapeMismatch {
                op: "conv encoder",
                left: tape.shape(x).to_vec(),
                right: vec![SEQ_LEN],
            });
        }
        let mut h = x;
        for (l, (cw, &(stride, pl, pr))) in self.layers.iter().zip(&CONV_GEOMETRY).enumerate() {
            let (w, b) = (tape.param(cw.w), tape.param(cw.b));
            h = tape.conv1d(h, w, b, stride, pl, pr)?;
            if l < 2 {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Mirror of [`ConvEncoder`]: `[B, 8, D]` to `[B, 32, C']`.
#[derive(Clone, Debug)]
pub struct ConvDecoder {
    layers: Vec<ConvWeights>,
}

impl ConvDecoder {
    /// `channels = [D, c2, c1, C']`.
    pub fn new(store: &mut ParamStore<f32>, name: &str, channels: [usize; 4], rng: &mut Rng) -> Result<Self, NumericsError> {
        let mut layers = Vec::new();
        for l in 0..3 {
            let (cin, cout) = (channels[l], channels[l + 1]);
            layers.push(ConvWeights {
                w: store.add_uniform(&format!("{name}.tconv{l}.w"), &[cin, CONV_KERNEL, cout], CONV_KERNEL * cin, rng)?,
                b: store.add_zeros(&format!("{name}.tconv{l}.b"), &[cout])?,
            });
        }
        Ok(Self { layers })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var, NumericsError> {
        if tape.shape(x).len() != 3 || tape.shape(x)[1] != CODE_LEN {
            return Err(NumericsError::ShapeMismatch {
                op: "conv decoder",
                left: tape.shape(x).to_vec(),
                right: vec![CODE_LEN],
            });
        }
        let mut h = x;
        for (l, (cw, &(stride, cl, cr))) in self.layers.iter().zip(CONV_GEOMETRY.iter().rev()).enumerate() {
            let (w, b) = (tape.param(cw.w), tape.param(cw.b));
            h = tape.conv_transpose1d(h, w, b, stride, cl, cr)?;
            if l < 2 {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Index of the nearest row of `codes` (`[K, D]` row-major) to `z`, by
/// squared Euclidean distance; ties go to the lowest index.
pub fn nearest_code<T: Scalar>(codes: &[T], dim: usize, z: &[T]) -> usize {
    let mut best = 0;
    let mut best_d = T::infinity();
    for (k, row) in codes.chunks(dim).enumerate() {
        let d: T = row.iter().zip(z).map(|(&c, &x)| (c - x) * (c - x)).sum();
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Quantizer state to replay: fixed code indices, the offset `e - z` added
/// to the encoder output in place of the lookup, and the values of `e` and
/// `z` that sit under the stop-gradients. Replaying them as constants makes
/// the true derivative of the replayed graph equal the stop-gradient one.
#[derive(Clone, Debug)]
pub struct FrozenCodes<T> {
    pub indices: Vec<usize>,
    pub offset: Tensor<T>,
    pub e: Tensor<T>,
    pub z: Tensor<T>,
}

pub struct VqOutput<T> {
    pub indices: Vec<usize>,
    /// Value passed downstream: the selected codes, with the gradient
    /// copied straight through to `z`.
    pub quantized: Var,
    /// `mean((sg[e] - z)²)`, gradient to the encoder only.
    pub l_cb: Var,
    /// `mean((e - sg[z])²)`, gradient to the codebook only.
    pub l_cmt: Var,
    pub frozen: FrozenCodes<T>,
}

#[derive(Clone, Debug)]
pub struct Codebook {
    pub h: ParamId,
    pub size: usize,
    pub dim: usize,
}

impl Codebook {
    pub fn new(store: &mut ParamStore<f32>, name: &str, size: usize, dim: usize, rng: &mut Rng) -> Result<Self, NumericsError> {
        let bound = 1.0 / size as f64;
        let t = Tensor::from_fn(&[size, dim], |_| rng.uniform_range(-bound, bound) as f32);
        Ok(Self {
            h: store.add(&format!("{name}.codebook"), t)?,
            size,
            dim,
        })
    }

    pub fn indices<T: Scalar>(&self, codes: &[T], z: &[T]) -> Vec<usize> {
        z.chunks(self.dim).map(|row| nearest_code(codes, self.dim, row)).collect()
    }

    /// Quantize `z` (`[..., D]`). With `frozen`, the indices and downstream
    /// offset are replayed instead of searched, which makes the graph smooth
    /// for finite-difference checks while keeping the same gradient.
    pub fn quantize<T: Scalar>(&self, tape: &mut Tape<'_, T>, z: Var, frozen: Option<&FrozenCodes<T>>) -> Result<VqOutput<T>, NumericsError> {
        let shape = tape.shape(z).to_vec();
        if shape.last() != Some(&self.dim) {
            return Err(NumericsError::ShapeMismatch {
                op: "vq",
                left: shape,
                right: vec![self.size, self.dim],
            });
        }
        let table = tape.param(self.h);
        let indices = match frozen {
            Some(f) => f.indices.clone(),
            None => self.indices(tape.value(table).data(), tape.value(z).data()),
        };
        let e = tape.embedding(table, &indices)?;
        let e = tape.reshape(e, &shape)?;
        let offset = match frozen {
            Some(f) => f.offset.clone(),
            None => {
                let (ev, zv) = (tape.value(e).data(), tape.value(z).data());
                Tensor::new(&shape, ev.iter().zip(zv).map(|(&a, &b)| a - b).collect())?
            }
        };
        let quantized = match frozen {
            Some(_) => {
                let off = tape.input(offset.clone())?;
                tape.add(z, off)?
            }
            None => tape.straight_through(z, e)?,
        };
        let (sg_e, sg_z) = match frozen {
            Some(f) => (tape.input(f.e.clone())?, tape.input(f.z.clone())?),
            None => (tape.stopgrad(e)?, tape.stopgrad(z)?),
        };
        let d_cb = tape.sub(sg_e, z)?;
        let d_cb = tape.square(d_cb)?;
        let l_cb = tape.mean(d_cb)?;
        let d_cmt = tape.sub(e, sg_z)?;
        let d_cmt = tape.square(d_cmt)?;
        let l_cmt = tape.mean(d_cmt)?;
        Ok(VqOutput {
            frozen: FrozenCodes {
                indices: indices.clone(),
                offset,
                e: tape.value(e).clone(),
                z: tape.value(z).clone(),
            },
            indices,
            quantized,
            l_cb,
            l_cmt,
        })
    }
}
