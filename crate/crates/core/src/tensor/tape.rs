use super::kernels;
use super::{ConvPadding, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    PointwiseConv { x: Var, w: Var, b: Var },
    DepthwiseConv { x: Var, w: Var, b: Var, dilation: usize, pad_left: usize },
    Prelu { x: Var, slope: Var },
    Relu(Var),
    Sigmoid(Var),
    /// Batch normalization; `xhat` and `inv_std` come from batch statistics
    /// in training mode and from the running statistics in eval mode.
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Add(Var, Var),
    Mul(Var, Var),
    WeightedSum(Vec<(Var, T)>),
    Mean(Var),
    MovingAverage { x: Var, window: usize },
    /// Element-wise map whose derivative was computed by the caller.
    LocalGrad { x: Var, local: Vec<T> },
    /// Scalar reduction of several inputs with caller-supplied partials.
    Reduce { inputs: Vec<Var>, partials: Vec<Vec<T>> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    non_finite: Option<(usize, &'static str)>,
}

#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence
    /// the loss.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

fn shape3<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    t.dims3().map_err(|_| Error::Shape(format!("{what}: expected [N, C, L], got {:?}", t.shape())))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.non_finite = None;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true, "leaf")
    }

    /// Leaf that never receives a gradient (inputs, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false, "constant")
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &'static str) -> Var {
        if cfg!(debug_assertions) && self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some((self.nodes.len(), name));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_raw(value, op, needs_grad, name)
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Tape(format!("variable {} not on this tape", v.0)));
        }
        Ok(())
    }

    /// `out[n,o,l] = b[o] + sum_i w[o,i,0] * x[n,i,l]`.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, cin, l) = shape3(self.value(x), "pointwise_conv input")?;
        let ws = self.value(w).shape().to_vec();
        let cout = ws[0];
        if ws != [cout, cin, 1] || self.value(b).shape() != [cout] {
            return Err(Error::Shape(format!(
                "pointwise_conv: input channels {cin}, weight {ws:?}, bias {:?}",
                self.value(b).shape()
            )));
        }
        let out = kernels::pointwise_conv(
            self.value(x).data(),
            (n, cin, l),
            self.value(w).data(),
            self.value(b).data(),
            cout,
        );
        let value = Tensor::new(&[n, cout, l], out)?;
        Ok(self.push(value, Op::PointwiseConv { x, w, b }, &[x, w, b], "pointwise_conv"))
    }

    /// `out[n,c,l] = b[c] + sum_j w[c,0,j] * x[n,c,l - pad + j*d]` with zero padding.
    pub fn depthwise_conv(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
        padding: ConvPadding,
    ) -> Result<Var> {
        if dilation < 1 {
            return Err(Error::Shape("depthwise_conv: dilation must be >= 1".into()));
        }
        let (n, c, l) = shape3(self.value(x), "depthwise_conv input")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 3 || ws[0] != c || ws[1] != 1 || ws[2] < 1 || self.value(b).shape() != [c] {
            return Err(Error::Shape(format!(
                "depthwise_conv: {c} channels vs weight {ws:?}"
            )));
        }
        let kernel = ws[2];
        let pad_left = padding.left(kernel, dilation);
        let out = kernels::depthwise_conv(
            self.value(x).data(),
            (n, c, l),
            self.value(w).data(),
            self.value(b).data(),
            kernel,
            dilation,
            pad_left,
        );
        let value = Tensor::new(&[n, c, l], out)?;
        Ok(self.push(
            value,
            Op::DepthwiseConv { x, w, b, dilation, pad_left },
            &[x, w, b],
            "depthwise_conv",
        ))
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let dims = shape3(self.value(x), "prelu input")?;
        if self.value(slope).shape() != [dims.1] {
            return Err(Error::Shape("prelu: one slope per channel".into()));
        }
        let out = kernels::prelu(self.value(x).data(), dims, self.value(slope).data());
        let value = Tensor::new(self.value(x).shape(), out)?;
        Ok(self.push(value, Op::Prelu { x, slope }, &[x, slope], "prelu"))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x], "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        self.push(value, Op::Sigmoid(x), &[x], "sigmoid")
    }

    /// Training-mode batch normalization. Returns the output and the batch
    /// statistics the caller folds into its running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, kernels::BatchStats<T>)> {
        let dims = shape3(self.value(x), "batch_norm input")?;
        self.check_affine(gamma, beta, dims.1)?;
        let stats = kernels::batch_stats(self.value(x).data(), dims);
        let inv_std: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::normalize(
            self.value(x).data(),
            dims,
            &stats.mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(self.value(x).shape(), y)?;
        let var = self.push(
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: true },
            &[x, gamma, beta],
            "batch_norm",
        );
        Ok((var, stats))
    }

    /// Eval-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let dims = shape3(self.value(x), "batch_norm input")?;
        self.check_affine(gamma, beta, dims.1)?;
        if running_mean.len() != dims.1 || running_var.len() != dims.1 {
            return Err(Error::Shape("batch_norm: running statistics length".into()));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::normalize(
            self.value(x).data(),
            dims,
            running_mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(self.value(x).shape(), y)?;
        Ok(self.push(
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: false },
            &[x, gamma, beta],
            "batch_norm",
        ))
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!("batch_norm: expected {c} affine parameters")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).ensure_same_shape(self.value(b), "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b), &[a, b], "add"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).ensure_same_shape(self.value(b), "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b], "mul"))
    }

    /// `sum_k c_k * v_k` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::Tape("weighted_sum of no terms".into()))?;
        let mut value = Tensor::zeros(self.value(first).shape());
        for &(v, c) in terms {
            self.value(first).ensure_same_shape(self.value(v), "weighted_sum")?;
            for (o, &x) in value.data_mut().iter_mut().zip(self.value(v).data()) {
                *o = *o + c * x;
            }
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(value, Op::WeightedSum(terms.to_vec()), &inputs, "weighted_sum"))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        self.push(value, Op::Mean(x), &[x], "mean")
    }

    pub fn moving_average(&mut self, x: Var, window: usize) -> Result<Var> {
        if window < 1 {
            return Err(Error::Shape("moving_average: window must be >= 1".into()));
        }
        let dims = shape3(self.value(x), "moving_average input")?;
        let out = kernels::moving_average(self.value(x).data(), dims, window);
        let value = Tensor::new(self.value(x).shape(), out)?;
        Ok(self.push(value, Op::MovingAverage { x, window }, &[x], "moving_average"))
    }

    /// Records `y = value` as an element-wise function of `x` whose
    /// derivative `dy/dx` is `local` (straight-through and surrogate rules).
    pub fn local_grad(&mut self, x: Var, value: Tensor<T>, local: Vec<T>) -> Result<Var> {
        self.value(x).ensure_same_shape(&value, "local_grad")?;
        if local.len() != value.len() {
            return Err(Error::Shape("local_grad: derivative length".into()));
        }
        Ok(self.push(value, Op::LocalGrad { x, local }, &[x], "local_grad"))
    }

    /// Records a scalar `value` depending on `inputs` with partial
    /// derivatives `partials[k]` (shaped like `inputs[k]`).
    pub fn reduce(&mut self, inputs: &[Var], value: T, partials: Vec<Vec<T>>) -> Result<Var> {
        if inputs.len() != partials.len() {
            return Err(Error::Tape("reduce: one partial per input".into()));
        }
        for (v, p) in inputs.iter().zip(&partials) {
            self.check_var(*v)?;
            if self.value(*v).len() != p.len() {
                return Err(Error::Shape("reduce: partial length".into()));
            }
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::Reduce { inputs: inputs.to_vec(), partials },
            inputs,
            "reduce",
        ))
    }

    /// Reverse sweep from a scalar `loss`. The tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward called before any forward operation".into()));
        }
        self.check_var(loss)?;
        if let Some((idx, name)) = self.non_finite {
            self.clear();
            return Err(Error::Numerical(format!("non-finite value produced by {name} (node {idx})")));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            for (target, g) in self.local_backward(idx, &dy)? {
                if !self.nodes[target.0].needs_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(dy);
        }
        self.clear();
        Ok(Gradients { grads })
    }

    fn local_backward(&self, idx: usize, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let like = |v: Var, data: Vec<T>| Tensor::new(self.value(v).shape(), data);
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::PointwiseConv { x, w, b } => {
                let dims = self.value(*x).dims3()?;
                let cout = self.value(*w).shape()[0];
                let (dx, dw, db) = kernels::pointwise_conv_backward(
                    self.value(*x).data(),
                    dims,
                    self.value(*w).data(),
                    cout,
                    dy.data(),
                );
                vec![(*x, like(*x, dx)?), (*w, like(*w, dw)?), (*b, like(*b, db)?)]
            }
            Op::DepthwiseConv { x, w, b, dilation, pad_left } => {
                let dims = self.value(*x).dims3()?;
                let kernel = self.value(*w).shape()[2];
                let (dx, dw, db) = kernels::depthwise_conv_backward(
                    self.value(*x).data(),
                    dims,
                    self.value(*w).data(),
                    kernel,
                    *dilation,
                    *pad_left,
                    dy.data(),
                );
                vec![(*x, like(*x, dx)?), (*w, like(*w, dw)?), (*b, like(*b, db)?)]
            }
            Op::Prelu { x, slope } => {
                let dims = self.value(*x).dims3()?;
                let (dx, da) =
                    kernels::prelu_backward(self.value(*x).data(), dims, self.value(*slope).data(), dy.data());
                vec![(*x, like(*x, dx)?), (*slope, like(*slope, da)?)]
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::Sigmoid(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let dims = self.value(*x).dims3()?;
                let gam = self.value(*gamma).data();
                let (dx, dg, db) = if *train {
                    kernels::batch_norm_train_backward(xhat, dims, inv_std, gam, dy.data())
                } else {
                    eval_norm_backward(xhat, dims, inv_std, gam, dy.data())
                };
                vec![(*x, like(*x, dx)?), (*gamma, like(*gamma, dg)?), (*beta, like(*beta, db)?)]
            }
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Mul(a, b) => {
                let da = dy.data().iter().zip(self.value(*b).data()).map(|(&g, &v)| g * v).collect();
                let db = dy.data().iter().zip(self.value(*a).data()).map(|(&g, &v)| g * v).collect();
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::WeightedSum(terms) => terms
                .iter()
                .map(|&(v, c)| (v, dy.map(|g| g * c)))
                .collect(),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let g = dy.item() / T::lit(n as f64);
                vec![(*x, Tensor::full(self.value(*x).shape(), g))]
            }
            Op::MovingAverage { x, window } => {
                let dims = self.value(*x).dims3()?;
                let dx = kernels::moving_average_backward(dims, *window, dy.data());
                vec![(*x, like(*x, dx)?)]
            }
            Op::LocalGrad { x, local } => {
                let dx = dy.data().iter().zip(local).map(|(&g, &d)| g * d).collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::Reduce { inputs, partials } => {
                let g = dy.item();
                inputs
                    .iter()
                    .zip(partials)
                    .map(|(&v, p)| Ok((v, like(v, p.iter().map(|&d| d * g).collect())?)))
                    .collect::<Result<_>>()?
            }
        };
        Ok(out)
    }
}

fn eval_norm_backward<T: Real>(
    xhat: &[T],
    (n, c, l): (usize, usize, usize),
    inv_std: &[T],
    gamma: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); dy.len()];
    let mut dg = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    for ni in 0..n {
        for ch in 0..c {
            let k = gamma[ch] * inv_std[ch];
            for i in (ni * c + ch) * l..(ni * c + ch + 1) * l {
                dx[i] = dy[i] * k;
                dg[ch] = dg[ch] + dy[i] * xhat[i];
                db[ch] = db[ch] + dy[i];
            }
        }
    }
    (dx, dg, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_on_empty_tape_is_an_error() {
        let mut tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::Tape(_))));
    }

    #[test]
    fn linear_loss_gradient_is_the_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[1, 3, 1], vec![1.0, -2.0, 0.5]).unwrap());
        let w = tape.leaf(Tensor::new(&[1, 3, 1], vec![0.3, 0.1, -0.7]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.pointwise_conv(x, w, b).unwrap();
        let loss = tape.mean(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, -2.0, 0.5]);
        assert!(tape.is_empty());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let y = tape.leaf(Tensor::scalar(3.0));
        let s = tape.add(y, y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let y = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(y).is_err());
    }
}
