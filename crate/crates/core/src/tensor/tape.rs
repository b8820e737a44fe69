use super::conv::{self, ConvSpec};
use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees.
pub struct BackwardCtx<'a> {
    pub grad_out: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    /// Which inputs need a gradient; entries for `false` may be `None`.
    pub needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// biased batch variance
    pub var: Vec<f32>,
    /// elements per channel the statistics were computed over
    pub count: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    Train { eps: f32 },
    Eval { mean: &'a Tensor, var: &'a Tensor, eps: f32 },
}

/// A dynamic reverse-mode tape.
///
/// Values are immutable once recorded. Gradients are kept only for leaves
/// created with `requires_grad`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] target with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Record an op. `backward` is only kept when some parent needs a gradient.
    pub fn push<F>(&mut self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&BackwardCtx) -> Result<Vec<Option<Tensor>>> + 'static,
    {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: parents.to_vec(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagate from the one-element value `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("loss elements", 1, self.nodes[loss.0].value.len()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad_out: &g,
                output: &node.value,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                needs: node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect(),
            };
            let pg = backward(&ctx)?;
            for (p, pg) in node.parents.iter().zip(pg) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        // keep leaf gradients only
        for (i, g) in grads.iter_mut().enumerate() {
            if self.nodes[i].backward.is_some() || !self.nodes[i].parents.is_empty() {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv::conv3d(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, &parents, move |c| {
            let (x, w) = (c.inputs[0], c.inputs[1]);
            let gx = if c.needs[0] {
                Some(conv::conv3d_backward_input(c.grad_out, w, &spec, x.shape())?)
            } else {
                None
            };
            let gw = if c.needs[1] {
                Some(conv::conv3d_backward_weight(x, c.grad_out, &spec)?)
            } else {
                None
            };
            let mut v = vec![gx, gw];
            if c.inputs.len() == 3 {
                v.push(Some(conv::channel_sum(c.grad_out)?));
            }
            Ok(v)
        }))
    }

    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv::conv_transpose3d(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, &parents, move |c| {
            let (x, w) = (c.inputs[0], c.inputs[1]);
            let gx = if c.needs[0] {
                Some(conv::conv_transpose3d_backward_input(c.grad_out, w, &spec, x.shape())?)
            } else {
                None
            };
            let gw = if c.needs[1] {
                Some(conv::conv_transpose3d_backward_weight(x, c.grad_out, &spec)?)
            } else {
                None
            };
            let mut v = vec![gx, gw];
            if c.inputs.len() == 3 {
                v.push(Some(conv::channel_sum(c.grad_out)?));
            }
            Ok(v)
        }))
    }

    pub fn max_pool3d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_pool3d(self.value(x), window, window)?;
        Ok(self.push(out, &[x], move |c| {
            Ok(vec![Some(kernels::max_pool3d_backward(c.grad_out, &argmax, c.inputs[0].shape()))])
        }))
    }

    /// Batch norm over `(N, D, H, W)` per channel. In train mode the batch
    /// statistics are returned so the caller can update running averages.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode) -> Result<(Var, Option<BatchStats>)> {
        match mode {
            BnMode::Train { eps } => {
                let (out, saved) = kernels::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
                let [n, _, d, h, w] = self.value(x).dims5()?;
                let stats = BatchStats {
                    mean: saved.mean.clone(),
                    var: saved.var.clone(),
                    count: n * d * h * w,
                };
                let v = self.push(out, &[x, gamma, beta], move |c| {
                    let (dx, dg, db) = kernels::batch_norm_train_backward(c.inputs[0], c.grad_out, c.inputs[1], &saved)?;
                    Ok(vec![Some(dx), Some(dg), Some(db)])
                });
                Ok((v, Some(stats)))
            }
            BnMode::Eval { mean, var, eps } => {
                let (out, scale) = kernels::batch_norm_eval(self.value(x), self.value(gamma), self.value(beta), mean, var, eps)?;
                let (mean, var) = (mean.clone(), var.clone());
                let v = self.push(out, &[x, gamma, beta], move |c| {
                    let x = c.inputs[0];
                    let [n, ch, d, h, w] = x.dims5()?;
                    let vol = d * h * w;
                    let mut dx = c.grad_out.clone();
                    let mut dg = vec![0.0f32; ch];
                    let mut db = vec![0.0f32; ch];
                    for b in 0..n {
                        for k in 0..ch {
                            let off = (b * ch + k) * vol;
                            let is = 1.0 / (var.data()[k] + eps).sqrt();
                            for i in off..off + vol {
                                let g = c.grad_out.data()[i];
                                dg[k] += g * (x.data()[i] - mean.data()[k]) * is;
                                db[k] += g;
                                dx.data_mut()[i] = g * scale[k];
                            }
                        }
                    }
                    Ok(vec![Some(dx), Some(Tensor::new(vec![ch], dg)?), Some(Tensor::new(vec![ch], db)?)])
                });
                Ok((v, None))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        self.push(out, &[x], |c| {
            let g = Tensor::new(
                c.grad_out.shape().to_vec(),
                c.grad_out.data().iter().zip(c.inputs[0].data()).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect(),
            )?;
            Ok(vec![Some(g)])
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = kernels::sigmoid(self.value(x));
        self.push(out, &[x], |c| {
            let g = Tensor::new(
                c.grad_out.shape().to_vec(),
                c.grad_out.data().iter().zip(c.output.data()).map(|(&g, &s)| g * s * (1.0 - s)).collect(),
            )?;
            Ok(vec![Some(g)])
        })
    }

    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_channel(self.value(x))?;
        Ok(self.push(out, &[x], |c| Ok(vec![Some(kernels::softmax_channel_backward(c.output, c.grad_out)?)])))
    }

    pub fn upsample_trilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = kernels::upsample_trilinear(self.value(x), factor)?;
        Ok(self.push(out, &[x], move |c| Ok(vec![Some(kernels::upsample_trilinear_backward(c.grad_out, factor)?)])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::InvalidArgument(format!("add: shapes {:?} and {:?} differ", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(out, &[a, b], |c| Ok(vec![Some(c.grad_out.clone()), Some(c.grad_out.clone())])))
    }

    /// `x ⊙ gate` where `gate` has a single channel broadcast over the channels of `x`.
    pub fn gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let gd = self.value(gate).dims5()?;
        if gd != [n, 1, d, h, w] {
            return Err(Error::InvalidArgument(format!(
                "gate shape {gd:?} does not broadcast over features {:?}",
                [n, c, d, h, w]
            )));
        }
        let vol = d * h * w;
        let (xv, gv) = (self.value(x).data(), self.value(gate).data());
        let mut out = vec![0.0f32; xv.len()];
        for (i, o) in out.chunks_mut(vol).enumerate() {
            let b = i / c;
            let g = &gv[b * vol..(b + 1) * vol];
            for ((o, &xv), &gv) in o.iter_mut().zip(&xv[i * vol..(i + 1) * vol]).zip(g) {
                *o = xv * gv;
            }
        }
        let out = Tensor::new(vec![n, c, d, h, w], out)?;
        Ok(self.push(out, &[x, gate], move |ctx| {
            let (xv, gv, go) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad_out.data());
            let mut gx = vec![0.0f32; xv.len()];
            let mut gg = vec![0.0f32; gv.len()];
            for i in 0..n * c {
                let b = i / c;
                for j in 0..vol {
                    let k = i * vol + j;
                    gx[k] = go[k] * gv[b * vol + j];
                    gg[b * vol + j] += go[k] * xv[k];
                }
            }
            Ok(vec![
                Some(Tensor::new(ctx.inputs[0].shape().to_vec(), gx)?),
                Some(Tensor::new(ctx.inputs[1].shape().to_vec(), gg)?),
            ])
        }))
    }

    /// Concatenate two 5-D tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, d, h, w] = self.value(a).dims5()?;
        let bd = self.value(b).dims5()?;
        for (i, axis) in [(0, "batch"), (2, "depth"), (3, "height"), (4, "width")] {
            let ad = [n, ca, d, h, w][i];
            if bd[i] != ad {
                return Err(Error::shape(format!("concat {axis}"), ad, bd[i]));
            }
        }
        let cb = bd[1];
        let vol = d * h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for s in 0..n {
            out.extend_from_slice(&av[s * ca * vol..(s + 1) * ca * vol]);
            out.extend_from_slice(&bv[s * cb * vol..(s + 1) * cb * vol]);
        }
        let out = Tensor::new(vec![n, ca + cb, d, h, w], out)?;
        Ok(self.push(out, &[a, b], move |c| {
            let g = c.grad_out.data();
            let mut ga = Vec::with_capacity(n * ca * vol);
            let mut gb = Vec::with_capacity(n * cb * vol);
            for s in 0..n {
                let base = s * (ca + cb) * vol;
                ga.extend_from_slice(&g[base..base + ca * vol]);
                gb.extend_from_slice(&g[base + ca * vol..base + (ca + cb) * vol]);
            }
            Ok(vec![
                Some(Tensor::new(vec![n, ca, d, h, w], ga)?),
                Some(Tensor::new(vec![n, cb, d, h, w], gb)?),
            ])
        }))
    }

    /// Σ wᵢ·xᵢ against a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(Error::InvalidArgument("weighted_sum: weight shape differs from input".into()));
        }
        let s = self.value(x).dot(weights) as f32;
        let w = weights.clone();
        Ok(self.push(Tensor::scalar(s), &[x], move |c| {
            let g = c.grad_out.item();
            Ok(vec![Some(w.map(|v| v * g))])
        }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, &[x], |c| Ok(vec![Some(c.grad_out.clone().reshape(c.inputs[0].shape())?)])))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        self.push(Tensor::scalar(s), &[x], |c| {
            Ok(vec![Some(Tensor::full(c.inputs[0].shape(), c.grad_out.item()))])
        })
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push(out, &[x], move |c| Ok(vec![Some(c.grad_out.map(|g| g * k))]))
    }

    /// `a + k·b` for one-element values.
    pub fn add_scaled(&mut self, a: Var, b: Var, k: f32) -> Result<Var> {
        if self.value(a).len() != 1 || self.value(b).len() != 1 {
            return Err(Error::InvalidArgument("add_scaled expects scalars".into()));
        }
        let out = Tensor::scalar(self.value(a).item() + k * self.value(b).item());
        Ok(self.push(out, &[a, b], move |c| {
            let g = c.grad_out.item();
            Ok(vec![Some(Tensor::scalar(g)), Some(Tensor::scalar(k * g))])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let w = t.value(x).clone();
        // Σ x·x built as weighted_sum with the (constant) value gives x; use gate-free path
        let y = t.weighted_sum(x, &w).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn gradients_accumulate_over_fanout() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0), true);
        let y = t.add_scaled(x, x, 3.0).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 4.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0), true);
        let c = t.constant(Tensor::scalar(5.0));
        let y = t.add_scaled(x, c, 1.0).unwrap();
        t.backward(y).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap().item(), 1.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]), true);
        let y = t.scale(x, 2.0);
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn concat_then_gate_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::ones(&[1, 2, 2, 2, 2]), true);
        let b = t.leaf(Tensor::ones(&[1, 3, 2, 2, 2]), true);
        let c = t.concat_channels(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[1, 5, 2, 2, 2]);
        let g = t.leaf(Tensor::full(&[1, 1, 2, 2, 2], 0.5), true);
        let o = t.gate(c, g).unwrap();
        assert!(t.value(o).data().iter().all(|&v| v == 0.5));
        let s = t.sum(o);
        t.backward(s).unwrap();
        assert!(t.grad(g).unwrap().data().iter().all(|&v| v == 5.0));
    }
}
