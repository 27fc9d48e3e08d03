//! Dynamic computation graph with reverse-mode gradients.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order; [`Graph::backward`] walks the tape once in reverse and accumulates
//! gradients into every `requires_grad` leaf. Graphs are rebuilt per step
//! (dynamic tape), which keeps alternating generator/discriminator updates
//! trivial to express.
//!
//! Shape rules are enforced with panics carrying the offending shapes;
//! fallible user input is validated before tensors ever reach the graph.
//! Ops do not check for NaN — the training loop surfaces non-finite losses
//! and gradients at evaluation points.

use std::cell::RefCell;
use std::rc::Rc;

use super::scalar::Scalar;
use super::tensor::{Param, Tensor};

/// Broadcast modes accepted by `add`/`mul`. Nothing beyond what the model
/// code needs: exact shape, a trailing-axis row vector, or a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    /// rhs is 1-D and matches the last axis of lhs.
    Row,
    /// rhs has a single element.
    Scalar,
}

#[derive(Debug, Clone, Copy)]
struct Conv1dSpec {
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    groups: usize,
    w_in: usize,
    w_out: usize,
}

#[derive(Debug, Clone, Copy)]
struct LvConv1dSpec {
    c_in: usize,
    c_out: usize,
    k: usize,
    frames: usize,
    frame_size: usize,
    len: usize,
}

#[derive(Debug, Clone, Copy)]
struct Conv2dSpec {
    c_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
}

enum Op<S: Scalar> {
    Leaf,
    Add {
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    AddScalar {
        a: usize,
    },
    Neg {
        a: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Mul {
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Transpose {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    /// Gathers overlapping windows of a 1-D signal (reflect padded); the
    /// precomputed map holds, for each output element, its source index.
    Frame1d {
        a: usize,
        index_map: Vec<u32>,
    },
    Conv1d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        spec: Conv1dSpec,
        cols: Tensor<S>,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        spec: Conv2dSpec,
        cols: Tensor<S>,
    },
    /// Location-variable convolution: each frame of the input is convolved
    /// with its own kernel and bias.
    LvConv1d {
        x: usize,
        kernels: usize,
        bias: usize,
        spec: LvConv1dSpec,
        cols: Tensor<S>,
    },
    AvgPool1d {
        a: usize,
        kernel: usize,
        stride: usize,
    },
    Mean {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Square {
        a: usize,
    },
    Sqrt {
        a: usize,
    },
    Exp {
        a: usize,
    },
    Log {
        a: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    Gelu {
        a: usize,
    },
    LeakyRelu {
        a: usize,
        slope: f64,
    },
    LayerNorm {
        a: usize,
        axis: usize,
        /// 1/sqrt(var + eps) per normalized slice.
        rstd: Vec<S>,
    },
}

struct TapeNode<S: Scalar> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

struct Tape<S: Scalar> {
    nodes: Vec<TapeNode<S>>,
    grads: Vec<Option<Tensor<S>>>,
    /// (param name, node id) in bind order.
    bindings: Vec<(String, usize)>,
}

/// Handle to a recorded computation graph. Cheap to clone; single-owner
/// during a forward/backward pass (not `Send`).
pub struct Graph<S: Scalar> {
    tape: Rc<RefCell<Tape<S>>>,
}

impl<S: Scalar> Clone for Graph<S> {
    fn clone(&self) -> Self {
        Graph {
            tape: Rc::clone(&self.tape),
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Graph`].
pub struct Node<S: Scalar> {
    graph: Graph<S>,
    id: usize,
}

impl<S: Scalar> Clone for Node<S> {
    fn clone(&self) -> Self {
        Node {
            graph: self.graph.clone(),
            id: self.id,
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            tape: Rc::new(RefCell::new(Tape {
                nodes: Vec::new(),
                grads: Vec::new(),
                bindings: Vec::new(),
            })),
        }
    }

    fn push(&self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Node<S> {
        let mut tape = self.tape.borrow_mut();
        tape.nodes.push(TapeNode {
            value,
            requires_grad,
            op,
        });
        tape.grads.push(None);
        Node {
            graph: self.clone(),
            id: tape.nodes.len() - 1,
        }
    }

    /// A constant input: no gradient flows into it.
    pub fn constant(&self, value: Tensor<S>) -> Node<S> {
        self.push(value, false, Op::Leaf)
    }

    /// A gradient leaf without a name (used by tests and the checker).
    pub fn leaf(&self, value: Tensor<S>) -> Node<S> {
        self.push(value, true, Op::Leaf)
    }

    /// Bind a named parameter as a gradient leaf. Binding the same parameter
    /// more than once is allowed; `param_grads` sums contributions by name.
    pub fn param(&self, p: &Param<S>) -> Node<S> {
        let node = self.push(p.value.clone(), true, Op::Leaf);
        self.tape
            .borrow_mut()
            .bindings
            .push((p.name.clone(), node.id));
        node
    }

    pub fn num_nodes(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    /// Reverse pass from a scalar loss. Visits the tape once in reverse
    /// recording order; gradients of previous backward calls are cleared.
    pub fn backward(&self, loss: &Node<S>) {
        assert!(
            Rc::ptr_eq(&self.tape, &loss.graph.tape),
            "loss node belongs to a different graph"
        );
        let mut tape = self.tape.borrow_mut();
        assert_eq!(
            tape.nodes[loss.id].value.numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            tape.nodes[loss.id].value.shape()
        );
        for g in tape.grads.iter_mut() {
            *g = None;
        }
        let loss_shape = tape.nodes[loss.id].value.shape().to_vec();
        tape.grads[loss.id] = Some(Tensor::full(&loss_shape, S::ONE));

        for id in (0..=loss.id).rev() {
            if !tape.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = tape.grads[id].take() else {
                continue;
            };
            backprop_one(&mut tape, id, &g);
            tape.grads[id] = Some(g);
        }
    }

    /// Gradients of bound parameters, summed per name, ordered by first
    /// binding. Parameters that did not receive gradient get zeros.
    pub fn param_grads(&self) -> Vec<(String, Tensor<S>)> {
        let tape = self.tape.borrow();
        let mut order: Vec<String> = Vec::new();
        let mut acc: std::collections::HashMap<String, Tensor<S>> =
            std::collections::HashMap::new();
        for (name, id) in &tape.bindings {
            let g = tape.grads[*id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(tape.nodes[*id].value.shape()));
            match acc.get_mut(name) {
                Some(t) => {
                    for (o, x) in t.data_mut().iter_mut().zip(g.data()) {
                        *o += *x;
                    }
                }
                None => {
                    order.push(name.clone());
                    acc.insert(name.clone(), g);
                }
            }
        }
        order
            .into_iter()
            .map(|n| {
                let g = acc.remove(&n).unwrap();
                (n, g)
            })
            .collect()
    }
}

impl<S: Scalar> Node<S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.tape.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.tape.borrow().nodes[self.id].value.numel()
    }

    /// Clone of the node's forward value.
    pub fn value(&self) -> Tensor<S> {
        self.graph.tape.borrow().nodes[self.id].value.clone()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> S {
        self.graph.tape.borrow().nodes[self.id].value.item()
    }

    /// Gradient accumulated by the latest `backward`, if any reached here.
    pub fn grad(&self) -> Option<Tensor<S>> {
        self.graph.tape.borrow().grads[self.id].clone()
    }

    fn same_graph(&self, other: &Node<S>) {
        assert!(
            Rc::ptr_eq(&self.graph.tape, &other.graph.tape),
            "nodes belong to different graphs"
        );
    }

    fn value_ref<R>(&self, f: impl FnOnce(&Tensor<S>) -> R) -> R {
        f(&self.graph.tape.borrow().nodes[self.id].value)
    }

    fn requires_grad(&self) -> bool {
        self.graph.tape.borrow().nodes[self.id].requires_grad
    }

    /// Same values, gradient flow severed.
    pub fn detach(&self) -> Node<S> {
        let v = self.value();
        self.graph.push(v, false, Op::Leaf)
    }

    pub fn add(&self, other: &Node<S>) -> Node<S> {
        self.same_graph(other);
        let (v, bc) = self.value_ref(|a| {
            other.value_ref(|b| {
                let bc = broadcast_kind(a.shape(), b.shape());
                (apply_binary(a, b, bc, |x, y| x + y), bc)
            })
        });
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(
            v,
            rg,
            Op::Add {
                a: self.id,
                b: other.id,
                bc,
            },
        )
    }

    pub fn sub(&self, other: &Node<S>) -> Node<S> {
        self.add(&other.neg())
    }

    pub fn add_scalar(&self, c: f64) -> Node<S> {
        let cv = S::from_f64(c);
        let v = self.value_ref(|a| a.map(|x| x + cv));
        self.graph
            .push(v, self.requires_grad(), Op::AddScalar { a: self.id })
    }

    pub fn neg(&self) -> Node<S> {
        let v = self.value_ref(|a| a.map(|x| -x));
        self.graph
            .push(v, self.requires_grad(), Op::Neg { a: self.id })
    }

    pub fn scale(&self, c: f64) -> Node<S> {
        let cv = S::from_f64(c);
        let v = self.value_ref(|a| a.map(|x| x * cv));
        self.graph
            .push(v, self.requires_grad(), Op::Scale { a: self.id, c })
    }

    pub fn mul(&self, other: &Node<S>) -> Node<S> {
        self.same_graph(other);
        let (v, bc) = self.value_ref(|a| {
            other.value_ref(|b| {
                let bc = broadcast_kind(a.shape(), b.shape());
                (apply_binary(a, b, bc, |x, y| x * y), bc)
            })
        });
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(
            v,
            rg,
            Op::Mul {
                a: self.id,
                b: other.id,
                bc,
            },
        )
    }

    pub fn matmul(&self, other: &Node<S>) -> Node<S> {
        self.same_graph(other);
        let v = self.value_ref(|a| {
            other.value_ref(|b| {
                let (sa, sb) = (a.shape(), b.shape());
                assert!(
                    sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
                    "matmul shape mismatch: {:?} x {:?}",
                    sa,
                    sb
                );
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = Tensor::zeros(&[m, n]);
                S::gemm(
                    m,
                    k,
                    n,
                    S::ONE,
                    a.data(),
                    k as isize,
                    1,
                    b.data(),
                    n as isize,
                    1,
                    S::ZERO,
                    out.data_mut(),
                    n as isize,
                    1,
                );
                out
            })
        });
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(
            v,
            rg,
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
        )
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Node<S> {
        let v = self.value_ref(|a| transpose2d(a));
        self.graph
            .push(v, self.requires_grad(), Op::Transpose { a: self.id })
    }

    pub fn reshape(&self, shape: &[usize]) -> Node<S> {
        let v = self.value_ref(|a| a.reshaped(shape));
        self.graph
            .push(v, self.requires_grad(), Op::Reshape { a: self.id })
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Node<S> {
        let v = self.value_ref(|a| slice_tensor(a, axis, start, len));
        self.graph.push(
            v,
            self.requires_grad(),
            Op::Slice {
                a: self.id,
                axis,
                start,
                len,
            },
        )
    }

    pub fn concat(parts: &[Node<S>], axis: usize) -> Node<S> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let graph = parts[0].graph.clone();
        for p in parts {
            parts[0].same_graph(p);
        }
        let tensors: Vec<Tensor<S>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<S>> = tensors.iter().collect();
        let v = concat_tensors(&refs, axis);
        let rg = parts.iter().any(|p| p.requires_grad());
        graph.push(
            v,
            rg,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        )
    }

    /// Overlapping windows of a 1-D signal, reflect-padded by `n_fft/2` on
    /// both sides, one row per hop: output `[ceil(len/hop), n_fft]`.
    pub fn frame1d(&self, n_fft: usize, hop: usize) -> Node<S> {
        assert!(hop >= 1, "frame1d hop must be >= 1");
        let (v, index_map) = self.value_ref(|a| {
            assert_eq!(a.shape().len(), 1, "frame1d input must be 1-D");
            let len = a.numel();
            assert!(len > 0, "frame1d on empty signal");
            let frames = len.div_ceil(hop);
            let pad = n_fft / 2;
            let mut map = Vec::with_capacity(frames * n_fft);
            let mut out = Vec::with_capacity(frames * n_fft);
            let data = a.data();
            for f in 0..frames {
                for j in 0..n_fft {
                    let pos = (f * hop + j) as i64 - pad as i64;
                    let src = reflect_index(pos, len as i64) as usize;
                    map.push(src as u32);
                    out.push(data[src]);
                }
            }
            (Tensor::new(&[frames, n_fft], out), map)
        });
        self.graph.push(
            v,
            self.requires_grad(),
            Op::Frame1d {
                a: self.id,
                index_map,
            },
        )
    }

    /// 1-D convolution: input `[c_in, w]`, weight `[c_out, c_in/groups, k]`,
    /// optional bias `[c_out]`, zero padding.
    pub fn conv1d(
        &self,
        weight: &Node<S>,
        bias: Option<&Node<S>>,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> Node<S> {
        self.same_graph(weight);
        if let Some(b) = bias {
            self.same_graph(b);
        }
        assert!(stride >= 1 && dilation >= 1 && groups >= 1, "bad conv1d spec");
        let x = self.value();
        let w = weight.value();
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        assert!(
            xs.len() == 2 && ws.len() == 3,
            "conv1d expects x [c_in, w], weight [c_out, c_in/groups, k]; got {:?}, {:?}",
            xs,
            ws
        );
        let (c_in, w_in) = (xs[0], xs[1]);
        let (c_out, wc_in, k) = (ws[0], ws[1], ws[2]);
        assert!(
            c_in % groups == 0 && c_out % groups == 0 && wc_in == c_in / groups,
            "conv1d group mismatch: c_in {c_in}, c_out {c_out}, groups {groups}, weight c_in {wc_in}"
        );
        let span = dilation * (k - 1) + 1;
        assert!(
            w_in + 2 * padding >= span,
            "conv1d input width {w_in} too small for kernel span {span} with padding {padding}"
        );
        let w_out = (w_in + 2 * padding - span) / stride + 1;
        let spec = Conv1dSpec {
            c_in,
            c_out,
            k,
            stride,
            padding,
            dilation,
            groups,
            w_in,
            w_out,
        };
        let cols = im2col1d(&x, &spec);
        let mut y = Tensor::zeros(&[c_out, w_out]);
        let gc_out = c_out / groups;
        let gk = (c_in / groups) * k;
        for g in 0..groups {
            let w_off = g * gc_out * gk;
            let c_off = g * gk * w_out;
            let y_off = g * gc_out * w_out;
            S::gemm(
                gc_out,
                gk,
                w_out,
                S::ONE,
                &w.data()[w_off..],
                gk as isize,
                1,
                &cols.data()[c_off..],
                w_out as isize,
                1,
                S::ZERO,
                &mut y.data_mut()[y_off..],
                w_out as isize,
                1,
            );
        }
        if let Some(b) = bias {
            let bv = b.value();
            assert_eq!(bv.shape(), &[c_out], "conv1d bias shape");
            for c in 0..c_out {
                let bc = bv.data()[c];
                for v in &mut y.data_mut()[c * w_out..(c + 1) * w_out] {
                    *v += bc;
                }
            }
        }
        let rg = self.requires_grad()
            || weight.requires_grad()
            || bias.map(|b| b.requires_grad()).unwrap_or(false);
        self.graph.push(
            y,
            rg,
            Op::Conv1d {
                x: self.id,
                w: weight.id,
                bias: bias.map(|b| b.id),
                spec,
                cols,
            },
        )
    }

    /// Location-variable convolution. Input `[c_in, len]` is split into
    /// `frames = len / frame_size` blocks; block `f` is convolved (stride 1,
    /// zero padding `(k-1)/2`, boundary samples taken from neighbor blocks)
    /// with kernel `kernels[f]` of shape `[c_out, c_in, k]` plus `bias[f]`.
    pub fn lv_conv1d(&self, kernels: &Node<S>, bias: &Node<S>, frame_size: usize) -> Node<S> {
        self.same_graph(kernels);
        self.same_graph(bias);
        let x = self.value();
        let kv = kernels.value();
        let bv = bias.value();
        let xs = x.shape().to_vec();
        let ks = kv.shape().to_vec();
        assert!(
            xs.len() == 2 && ks.len() == 4,
            "lv_conv1d expects x [c_in, len], kernels [frames, c_out, c_in, k]; got {:?}, {:?}",
            xs,
            ks
        );
        let (c_in, len) = (xs[0], xs[1]);
        let (frames, c_out, kc_in, k) = (ks[0], ks[1], ks[2], ks[3]);
        assert!(
            kc_in == c_in && k % 2 == 1,
            "lv_conv1d kernel shape mismatch: {:?} for input {:?}",
            ks,
            xs
        );
        assert!(
            frame_size > 0 && len == frames * frame_size,
            "lv_conv1d length {len} != {frames} frames x {frame_size}"
        );
        assert_eq!(bv.shape(), &[frames, c_out], "lv_conv1d bias shape");
        let spec = LvConv1dSpec {
            c_in,
            c_out,
            k,
            frames,
            frame_size,
            len,
        };
        // Frame-major column matrix: each frame's [c_in*k, frame_size]
        // block is contiguous, so the per-frame matrix products stay cache
        // friendly. Boundary taps read neighbor frames' samples directly;
        // only the signal ends are zero padded.
        let cols = lv_im2col(&x, &spec);
        let cik = c_in * k;
        let mut y = Tensor::zeros(&[c_out, len]);
        for f in 0..frames {
            S::gemm(
                c_out,
                cik,
                frame_size,
                S::ONE,
                &kv.data()[f * c_out * cik..],
                cik as isize,
                1,
                &cols.data()[f * cik * frame_size..],
                frame_size as isize,
                1,
                S::ZERO,
                &mut y.data_mut()[f * frame_size..],
                len as isize,
                1,
            );
        }
        for f in 0..frames {
            for c in 0..c_out {
                let b = bv.data()[f * c_out + c];
                for v in &mut y.data_mut()[c * len + f * frame_size..c * len + (f + 1) * frame_size]
                {
                    *v += b;
                }
            }
        }
        let rg = self.requires_grad() || kernels.requires_grad() || bias.requires_grad();
        self.graph.push(
            y,
            rg,
            Op::LvConv1d {
                x: self.id,
                kernels: kernels.id,
                bias: bias.id,
                spec,
                cols,
            },
        )
    }

    /// 2-D convolution: input `[c_in, h, w]`, weight `[c_out, c_in, kh, kw]`,
    /// optional bias `[c_out]`, zero padding.
    pub fn conv2d(
        &self,
        weight: &Node<S>,
        bias: Option<&Node<S>>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Node<S> {
        self.same_graph(weight);
        if let Some(b) = bias {
            self.same_graph(b);
        }
        let x = self.value();
        let w = weight.value();
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        assert!(
            xs.len() == 3 && ws.len() == 4 && xs[0] == ws[1],
            "conv2d expects x [c_in, h, w], weight [c_out, c_in, kh, kw]; got {:?}, {:?}",
            xs,
            ws
        );
        let (c_in, h_in, w_in) = (xs[0], xs[1], xs[2]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        let (sh, sw) = stride;
        let (ph, pw) = padding;
        assert!(sh >= 1 && sw >= 1, "bad conv2d stride");
        assert!(
            h_in + 2 * ph >= kh && w_in + 2 * pw >= kw,
            "conv2d input {h_in}x{w_in} too small for kernel {kh}x{kw}"
        );
        let h_out = (h_in + 2 * ph - kh) / sh + 1;
        let w_out = (w_in + 2 * pw - kw) / sw + 1;
        let spec = Conv2dSpec {
            c_in,
            c_out,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            h_in,
            w_in,
            h_out,
            w_out,
        };
        let cols = im2col2d(&x, &spec);
        let kdim = c_in * kh * kw;
        let npos = h_out * w_out;
        let mut y = Tensor::zeros(&[c_out, h_out, w_out]);
        S::gemm(
            c_out,
            kdim,
            npos,
            S::ONE,
            w.data(),
            kdim as isize,
            1,
            cols.data(),
            npos as isize,
            1,
            S::ZERO,
            y.data_mut(),
            npos as isize,
            1,
        );
        if let Some(b) = bias {
            let bv = b.value();
            assert_eq!(bv.shape(), &[c_out], "conv2d bias shape");
            for c in 0..c_out {
                let bc = bv.data()[c];
                for v in &mut y.data_mut()[c * npos..(c + 1) * npos] {
                    *v += bc;
                }
            }
        }
        let rg = self.requires_grad()
            || weight.requires_grad()
            || bias.map(|b| b.requires_grad()).unwrap_or(false);
        self.graph.push(
            y,
            rg,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                bias: bias.map(|b| b.id),
                spec,
                cols,
            },
        )
    }

    /// Average pooling over the last axis of a `[c, w]` tensor.
    pub fn avg_pool1d(&self, kernel: usize, stride: usize) -> Node<S> {
        assert!(kernel >= 1 && stride >= 1, "bad avg_pool1d spec");
        let v = self.value_ref(|a| {
            let s = a.shape();
            assert_eq!(s.len(), 2, "avg_pool1d expects [c, w], got {:?}", s);
            let (c, w) = (s[0], s[1]);
            assert!(w >= kernel, "avg_pool1d width {w} < kernel {kernel}");
            let w_out = (w - kernel) / stride + 1;
            let inv = S::from_f64(1.0 / kernel as f64);
            let mut out = Tensor::zeros(&[c, w_out]);
            for ci in 0..c {
                let row = &a.data()[ci * w..(ci + 1) * w];
                let orow = &mut out.data_mut()[ci * w_out..(ci + 1) * w_out];
                for (o, slot) in orow.iter_mut().enumerate() {
                    let mut acc = S::ZERO;
                    for item in &row[o * stride..o * stride + kernel] {
                        acc += *item;
                    }
                    *slot = acc * inv;
                }
            }
            out
        });
        self.graph.push(
            v,
            self.requires_grad(),
            Op::AvgPool1d {
                a: self.id,
                kernel,
                stride,
            },
        )
    }

    /// Mean over all elements, yielding a `[1]` scalar.
    pub fn mean(&self) -> Node<S> {
        let v = self.value_ref(|a| {
            assert!(a.numel() > 0, "mean of zero-size tensor");
            let mut acc = S::ZERO;
            for &x in a.data() {
                acc += x;
            }
            Tensor::scalar(acc * S::from_f64(1.0 / a.numel() as f64))
        });
        self.graph
            .push(v, self.requires_grad(), Op::Mean { a: self.id })
    }

    /// Sum over all elements, yielding a `[1]` scalar.
    pub fn sum(&self) -> Node<S> {
        let v = self.value_ref(|a| {
            assert!(a.numel() > 0, "sum of zero-size tensor");
            let mut acc = S::ZERO;
            for &x in a.data() {
                acc += x;
            }
            Tensor::scalar(acc)
        });
        self.graph
            .push(v, self.requires_grad(), Op::Sum { a: self.id })
    }

    pub fn square(&self) -> Node<S> {
        let v = self.value_ref(|a| a.map(|x| x * x));
        self.graph
            .push(v, self.requires_grad(), Op::Square { a: self.id })
    }

    /// Elementwise square root. The gradient at exactly zero is defined as
    /// zero (subgradient choice) so magnitudes of silent spectrogram bins do
    /// not produce infinities.
    pub fn sqrt(&self) -> Node<S> {
        let v = self.value_ref(|a| a.map(|x| x.sqrt()));
        self.graph
            .push(v, self.requires_grad(), Op::Sqrt { a: self.id })
    }

    pub fn exp(&self) -> Node<S> {
        let v = self.value_ref(|a| a.map(|x| x.exp()));
        self.graph
            .push(v, self.requires_grad(), Op::Exp { a: self.id })
    }

    pub fn log(&self) -> Node<S> {
        let v = self.value_ref(|a| a.map(|x| x.ln()));
        self.graph
            .push(v, self.requires_grad(), Op::Log { a: self.id })
    }

    pub fn softmax(&self, axis: usize) -> Node<S> {
        let v = self.value_ref(|a| {
            let (outer, alen, inner) = axis_split(a.shape(), axis);
            assert!(alen > 0, "softmax over zero-size axis");
            let mut out = a.clone();
            if inner == 1 {
                for row in out.data_mut().chunks_exact_mut(alen).take(outer) {
                    let mut mx = row[0];
                    for &x in row.iter() {
                        mx = mx.maximum(x);
                    }
                    let mut denom = S::ZERO;
                    for x in row.iter_mut() {
                        *x = (*x - mx).fast_exp();
                        denom += *x;
                    }
                    let inv = S::ONE / denom;
                    for x in row.iter_mut() {
                        *x *= inv;
                    }
                }
            } else {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * alen + j) * inner + i;
                        let mut mx = out.data()[idx(0)];
                        for j in 1..alen {
                            mx = mx.maximum(out.data()[idx(j)]);
                        }
                        let mut denom = S::ZERO;
                        for j in 0..alen {
                            let e = (out.data()[idx(j)] - mx).fast_exp();
                            out.data_mut()[idx(j)] = e;
                            denom += e;
                        }
                        let inv = S::ONE / denom;
                        for j in 0..alen {
                            out.data_mut()[idx(j)] *= inv;
                        }
                    }
                }
            }
            out
        });
        self.graph.push(
            v,
            self.requires_grad(),
            Op::Softmax {
                a: self.id,
                axis,
            },
        )
    }

    pub fn gelu(&self) -> Node<S> {
        let v = self.value_ref(|a| a.map(|x| gelu_fwd(x)));
        self.graph
            .push(v, self.requires_grad(), Op::Gelu { a: self.id })
    }

    pub fn leaky_relu(&self, slope: f64) -> Node<S> {
        let sv = S::from_f64(slope);
        let v = self.value_ref(|a| a.map(|x| if x > S::ZERO { x } else { x * sv }));
        self.graph.push(
            v,
            self.requires_grad(),
            Op::LeakyRelu {
                a: self.id,
                slope,
            },
        )
    }

    /// Layer normalization over one axis (no affine): `(x - mean) / sqrt(var + eps)`.
    pub fn layer_norm(&self, axis: usize, eps: f64) -> Node<S> {
        let (v, rstd) = self.value_ref(|a| {
            let (outer, alen, inner) = axis_split(a.shape(), axis);
            assert!(alen > 0, "layer_norm over zero-size axis");
            let mut out = a.clone();
            let mut rstds = Vec::with_capacity(outer * inner);
            let inv_n = S::from_f64(1.0 / alen as f64);
            let epsv = S::from_f64(eps);
            if inner == 1 {
                for row in out.data_mut().chunks_exact_mut(alen).take(outer) {
                    let mut mean = S::ZERO;
                    for &x in row.iter() {
                        mean += x;
                    }
                    mean *= inv_n;
                    let mut var = S::ZERO;
                    for &x in row.iter() {
                        let d = x - mean;
                        var += d * d;
                    }
                    var *= inv_n;
                    let rstd = S::ONE / (var + epsv).sqrt();
                    rstds.push(rstd);
                    for x in row.iter_mut() {
                        *x = (*x - mean) * rstd;
                    }
                }
                return (out, rstds);
            }
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * alen + j) * inner + i;
                    let mut mean = S::ZERO;
                    for j in 0..alen {
                        mean += out.data()[idx(j)];
                    }
                    mean *= inv_n;
                    let mut var = S::ZERO;
                    for j in 0..alen {
                        let d = out.data()[idx(j)] - mean;
                        var += d * d;
                    }
                    var *= inv_n;
                    let rstd = S::ONE / (var + epsv).sqrt();
                    rstds.push(rstd);
                    for j in 0..alen {
                        let y = (out.data()[idx(j)] - mean) * rstd;
                        out.data_mut()[idx(j)] = y;
                    }
                }
            }
            (out, rstds)
        });
        self.graph.push(
            v,
            self.requires_grad(),
            Op::LayerNorm {
                a: self.id,
                axis,
                rstd,
            },
        )
    }
}

// ---------------------------------------------------------------------------
// Backward rules
// ---------------------------------------------------------------------------

fn backprop_one<S: Scalar>(tape: &mut Tape<S>, id: usize, g: &Tensor<S>) {
    // Temporarily move the op out so the tape can be borrowed freely.
    let op = std::mem::replace(&mut tape.nodes[id].op, Op::Leaf);
    match &op {
        Op::Leaf => {}
        Op::Add { a, b, bc } => {
            accumulate_into(tape, *a, g, |g| g.clone());
            let bc = *bc;
            accumulate_into(tape, *b, g, |g| reduce_broadcast(g, bc));
        }
        Op::AddScalar { a } | Op::Reshape { a } => {
            let shape = tape.nodes[*a].value.shape().to_vec();
            accumulate_into(tape, *a, g, |g| g.reshaped(&shape));
        }
        Op::Neg { a } => accumulate_into(tape, *a, g, |g| g.map(|x| -x)),
        Op::Scale { a, c } => {
            let cv = S::from_f64(*c);
            accumulate_into(tape, *a, g, |g| g.map(|x| x * cv));
        }
        Op::Mul { a, b, bc } => {
            let (av, bv) = (tape.nodes[*a].value.clone(), tape.nodes[*b].value.clone());
            let bc = *bc;
            accumulate_into(tape, *a, g, |g| apply_binary(g, &bv, bc, |x, y| x * y));
            accumulate_into(tape, *b, g, |g| {
                // d/db = reduce(g * a) under the same broadcast
                let mut prod = g.clone();
                for (p, &x) in prod.data_mut().iter_mut().zip(av.data()) {
                    *p *= x;
                }
                reduce_broadcast(&prod, bc)
            });
        }
        Op::Matmul { a, b } => {
            let (av, bv) = (tape.nodes[*a].value.clone(), tape.nodes[*b].value.clone());
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if tape.nodes[*a].requires_grad {
                let ga = ensure_grad(tape, *a);
                // dA = G * B^T
                S::gemm(
                    m,
                    n,
                    k,
                    S::ONE,
                    g.data(),
                    n as isize,
                    1,
                    bv.data(),
                    1,
                    n as isize,
                    S::ONE,
                    ga.data_mut(),
                    k as isize,
                    1,
                );
            }
            if tape.nodes[*b].requires_grad {
                let gb = ensure_grad(tape, *b);
                // dB = A^T * G
                S::gemm(
                    k,
                    m,
                    n,
                    S::ONE,
                    av.data(),
                    1,
                    k as isize,
                    g.data(),
                    n as isize,
                    1,
                    S::ONE,
                    gb.data_mut(),
                    n as isize,
                    1,
                );
            }
        }
        Op::Transpose { a } => accumulate_into(tape, *a, g, |g| transpose2d(g)),
        Op::Slice {
            a,
            axis,
            start,
            len,
        } => {
            let src_shape = tape.nodes[*a].value.shape().to_vec();
            let (axis, start, len) = (*axis, *start, *len);
            if tape.nodes[*a].requires_grad {
                let ga = ensure_grad(tape, *a);
                scatter_slice_add(ga, g, &src_shape, axis, start, len);
            }
        }
        Op::Concat { parts, axis } => {
            let mut off = 0usize;
            for &p in parts {
                let plen = tape.nodes[p].value.shape()[*axis];
                if tape.nodes[p].requires_grad {
                    let piece = slice_tensor(g, *axis, off, plen);
                    accumulate_into(tape, p, &piece, |x| x.clone());
                }
                off += plen;
            }
        }
        Op::Frame1d { a, index_map } => {
            if tape.nodes[*a].requires_grad {
                let ga = ensure_grad(tape, *a);
                let gd = ga.data_mut();
                for (&src, &gv) in index_map.iter().zip(g.data()) {
                    gd[src as usize] += gv;
                }
            }
        }
        Op::Conv1d {
            x,
            w,
            bias,
            spec,
            cols,
        } => {
            conv1d_backward(tape, g, *x, *w, *bias, spec, cols);
        }
        Op::Conv2d {
            x,
            w,
            bias,
            spec,
            cols,
        } => {
            conv2d_backward(tape, g, *x, *w, *bias, spec, cols);
        }
        Op::LvConv1d {
            x,
            kernels,
            bias,
            spec,
            cols,
        } => {
            lv_conv1d_backward(tape, g, *x, *kernels, *bias, spec, cols);
        }
        Op::AvgPool1d { a, kernel, stride } => {
            let (kernel, stride) = (*kernel, *stride);
            let (c, w_out) = (g.shape()[0], g.shape()[1]);
            if tape.nodes[*a].requires_grad {
                let w_in = tape.nodes[*a].value.shape()[1];
                let inv = S::from_f64(1.0 / kernel as f64);
                let ga = ensure_grad(tape, *a);
                let gd = ga.data_mut();
                for ci in 0..c {
                    for o in 0..w_out {
                        let gv = g.data()[ci * w_out + o] * inv;
                        for j in 0..kernel {
                            gd[ci * w_in + o * stride + j] += gv;
                        }
                    }
                }
            }
        }
        Op::Mean { a } => {
            let n = tape.nodes[*a].value.numel();
            let shape = tape.nodes[*a].value.shape().to_vec();
            let gv = g.item() * S::from_f64(1.0 / n as f64);
            accumulate_into(tape, *a, g, |_| Tensor::full(&shape, gv));
        }
        Op::Sum { a } => {
            let shape = tape.nodes[*a].value.shape().to_vec();
            let gv = g.item();
            accumulate_into(tape, *a, g, |_| Tensor::full(&shape, gv));
        }
        Op::Square { a } => {
            let av = tape.nodes[*a].value.clone();
            accumulate_into(tape, *a, g, |g| {
                let two = S::from_f64(2.0);
                zip_map(g, &av, |gv, x| gv * two * x)
            });
        }
        Op::Sqrt { a } => {
            let yv = tape.nodes[id].value.clone();
            accumulate_into(tape, *a, g, |g| {
                let half = S::from_f64(0.5);
                zip_map(g, &yv, |gv, y| {
                    if y == S::ZERO {
                        S::ZERO
                    } else {
                        gv * half / y
                    }
                })
            });
        }
        Op::Exp { a } => {
            let yv = tape.nodes[id].value.clone();
            accumulate_into(tape, *a, g, |g| zip_map(g, &yv, |gv, y| gv * y));
        }
        Op::Log { a } => {
            let av = tape.nodes[*a].value.clone();
            accumulate_into(tape, *a, g, |g| zip_map(g, &av, |gv, x| gv / x));
        }
        Op::Softmax { a, axis } => {
            let yv = tape.nodes[id].value.clone();
            let (outer, alen, inner) = axis_split(yv.shape(), *axis);
            accumulate_into(tape, *a, g, |g| {
                let mut out = Tensor::zeros(yv.shape());
                if inner == 1 {
                    for ((orow, grow), yrow) in out
                        .data_mut()
                        .chunks_exact_mut(alen)
                        .zip(g.data().chunks_exact(alen))
                        .zip(yv.data().chunks_exact(alen))
                        .take(outer)
                    {
                        let mut dot = S::ZERO;
                        for (gv, yv) in grow.iter().zip(yrow) {
                            dot += *gv * *yv;
                        }
                        for ((o, gv), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o = *yv * (*gv - dot);
                        }
                    }
                } else {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * alen + j) * inner + i;
                            let mut dot = S::ZERO;
                            for j in 0..alen {
                                dot += g.data()[idx(j)] * yv.data()[idx(j)];
                            }
                            for j in 0..alen {
                                let y = yv.data()[idx(j)];
                                out.data_mut()[idx(j)] = y * (g.data()[idx(j)] - dot);
                            }
                        }
                    }
                }
                out
            });
        }
        Op::Gelu { a } => {
            let av = tape.nodes[*a].value.clone();
            accumulate_into(tape, *a, g, |g| zip_map(g, &av, |gv, x| gv * gelu_bwd(x)));
        }
        Op::LeakyRelu { a, slope } => {
            let av = tape.nodes[*a].value.clone();
            let sv = S::from_f64(*slope);
            accumulate_into(tape, *a, g, |g| {
                zip_map(g, &av, |gv, x| if x > S::ZERO { gv } else { gv * sv })
            });
        }
        Op::LayerNorm { a, axis, rstd } => {
            let yv = tape.nodes[id].value.clone();
            let (outer, alen, inner) = axis_split(yv.shape(), *axis);
            let inv_n = S::from_f64(1.0 / alen as f64);
            accumulate_into(tape, *a, g, |g| {
                let mut out = Tensor::zeros(yv.shape());
                if inner == 1 {
                    for (o, (orow, (grow, yrow))) in out
                        .data_mut()
                        .chunks_exact_mut(alen)
                        .zip(g.data().chunks_exact(alen).zip(yv.data().chunks_exact(alen)))
                        .take(outer)
                        .enumerate()
                    {
                        let r = rstd[o];
                        let mut gsum = S::ZERO;
                        let mut gysum = S::ZERO;
                        for (gv, yv) in grow.iter().zip(yrow) {
                            gsum += *gv;
                            gysum += *gv * *yv;
                        }
                        let gmean = gsum * inv_n;
                        let gymean = gysum * inv_n;
                        for ((ov, gv), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *ov = r * (*gv - gmean - *yv * gymean);
                        }
                    }
                    return out;
                }
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * alen + j) * inner + i;
                        let r = rstd[o * inner + i];
                        let mut gsum = S::ZERO;
                        let mut gysum = S::ZERO;
                        for j in 0..alen {
                            gsum += g.data()[idx(j)];
                            gysum += g.data()[idx(j)] * yv.data()[idx(j)];
                        }
                        let gmean = gsum * inv_n;
                        let gymean = gysum * inv_n;
                        for j in 0..alen {
                            let y = yv.data()[idx(j)];
                            out.data_mut()[idx(j)] =
                                r * (g.data()[idx(j)] - gmean - y * gymean);
                        }
                    }
                }
                out
            });
        }
    }
    tape.nodes[id].op = op;
}

/// Add `make(g)` into the gradient buffer of `parent` if it needs gradients.
fn accumulate_into<S: Scalar>(
    tape: &mut Tape<S>,
    parent: usize,
    g: &Tensor<S>,
    make: impl FnOnce(&Tensor<S>) -> Tensor<S>,
) {
    if !tape.nodes[parent].requires_grad {
        return;
    }
    let piece = make(g);
    let buf = ensure_grad(tape, parent);
    debug_assert_eq!(buf.shape(), piece.shape());
    for (o, &x) in buf.data_mut().iter_mut().zip(piece.data()) {
        *o += x;
    }
}

fn ensure_grad<'t, S: Scalar>(tape: &'t mut Tape<S>, id: usize) -> &'t mut Tensor<S> {
    if tape.grads[id].is_none() {
        let shape = tape.nodes[id].value.shape().to_vec();
        tape.grads[id] = Some(Tensor::zeros(&shape));
    }
    tape.grads[id].as_mut().unwrap()
}

fn conv1d_backward<S: Scalar>(
    tape: &mut Tape<S>,
    g: &Tensor<S>,
    x: usize,
    w: usize,
    bias: Option<usize>,
    spec: &Conv1dSpec,
    cols: &Tensor<S>,
) {
    let gc_out = spec.c_out / spec.groups;
    let gc_in = spec.c_in / spec.groups;
    let gk = gc_in * spec.k;
    let w_out = spec.w_out;

    if let Some(b) = bias {
        if tape.nodes[b].requires_grad {
            let gb = ensure_grad(tape, b);
            for c in 0..spec.c_out {
                let mut acc = S::ZERO;
                for &gv in &g.data()[c * w_out..(c + 1) * w_out] {
                    acc += gv;
                }
                gb.data_mut()[c] += acc;
            }
        }
    }
    if tape.nodes[w].requires_grad {
        let gw = ensure_grad(tape, w);
        for grp in 0..spec.groups {
            // dW_g = dy_g * cols_g^T
            S::gemm(
                gc_out,
                w_out,
                gk,
                S::ONE,
                &g.data()[grp * gc_out * w_out..],
                w_out as isize,
                1,
                &cols.data()[grp * gk * w_out..],
                1,
                w_out as isize,
                S::ONE,
                &mut gw.data_mut()[grp * gc_out * gk..],
                gk as isize,
                1,
            );
        }
    }
    if tape.nodes[x].requires_grad {
        let wv = tape.nodes[w].value.clone();
        let mut dcols = Tensor::zeros(&[spec.groups * gk, w_out]);
        for grp in 0..spec.groups {
            // dcols_g = W_g^T * dy_g
            S::gemm(
                gk,
                gc_out,
                w_out,
                S::ONE,
                &wv.data()[grp * gc_out * gk..],
                1,
                gk as isize,
                &g.data()[grp * gc_out * w_out..],
                w_out as isize,
                1,
                S::ONE,
                &mut dcols.data_mut()[grp * gk * w_out..],
                w_out as isize,
                1,
            );
        }
        let gx = ensure_grad(tape, x);
        col2im1d_add(gx, &dcols, spec);
    }
}

fn lv_conv1d_backward<S: Scalar>(
    tape: &mut Tape<S>,
    g: &Tensor<S>,
    x: usize,
    kernels: usize,
    bias: usize,
    spec: &LvConv1dSpec,
    cols: &Tensor<S>,
) {
    let cik = spec.c_in * spec.k;
    let (len, fs) = (spec.len, spec.frame_size);
    if tape.nodes[bias].requires_grad {
        let gb = ensure_grad(tape, bias);
        for f in 0..spec.frames {
            for c in 0..spec.c_out {
                let mut acc = S::ZERO;
                for &gv in &g.data()[c * len + f * fs..c * len + (f + 1) * fs] {
                    acc += gv;
                }
                gb.data_mut()[f * spec.c_out + c] += acc;
            }
        }
    }
    if tape.nodes[kernels].requires_grad {
        let gk = ensure_grad(tape, kernels);
        for f in 0..spec.frames {
            // dW_f = dy_f * cols_f^T
            S::gemm(
                spec.c_out,
                fs,
                cik,
                S::ONE,
                &g.data()[f * fs..],
                len as isize,
                1,
                &cols.data()[f * cik * fs..],
                1,
                fs as isize,
                S::ONE,
                &mut gk.data_mut()[f * spec.c_out * cik..],
                cik as isize,
                1,
            );
        }
    }
    if tape.nodes[x].requires_grad {
        let kv = tape.nodes[kernels].value.clone();
        let mut dcols = Tensor::zeros(&[spec.frames * cik, fs]);
        for f in 0..spec.frames {
            // dcols_f = W_f^T * dy_f
            S::gemm(
                cik,
                spec.c_out,
                fs,
                S::ONE,
                &kv.data()[f * spec.c_out * cik..],
                1,
                cik as isize,
                &g.data()[f * fs..],
                len as isize,
                1,
                S::ZERO,
                &mut dcols.data_mut()[f * cik * fs..],
                fs as isize,
                1,
            );
        }
        let gx = ensure_grad(tape, x);
        lv_col2im_add(gx, &dcols, spec);
    }
}

/// Frame-major column gather for the location-variable convolution:
/// `cols[f][ci*k + kk][j] = x[ci][f*fs + j + kk - (k-1)/2]`, zero outside
/// the signal.
fn lv_im2col<S: Scalar>(x: &Tensor<S>, spec: &LvConv1dSpec) -> Tensor<S> {
    let (cik, fs, len) = (spec.c_in * spec.k, spec.frame_size, spec.len);
    let pad = (spec.k - 1) / 2;
    let mut cols = Tensor::zeros(&[spec.frames * cik, fs]);
    let xd = x.data();
    let cd = cols.data_mut();
    for f in 0..spec.frames {
        let base = (f * fs) as i64;
        for ci in 0..spec.c_in {
            let xrow = &xd[ci * len..(ci + 1) * len];
            for kk in 0..spec.k {
                let shift = base + kk as i64 - pad as i64;
                let lo = (-shift).clamp(0, fs as i64) as usize;
                let hi = (len as i64 - shift).clamp(lo as i64, fs as i64) as usize;
                if hi > lo {
                    let dst_off = (f * cik + ci * spec.k + kk) * fs;
                    let src = (lo as i64 + shift) as usize;
                    cd[dst_off + lo..dst_off + hi].copy_from_slice(&xrow[src..src + hi - lo]);
                }
            }
        }
    }
    cols
}

fn lv_col2im_add<S: Scalar>(gx: &mut Tensor<S>, dcols: &Tensor<S>, spec: &LvConv1dSpec) {
    let (cik, fs, len) = (spec.c_in * spec.k, spec.frame_size, spec.len);
    let pad = (spec.k - 1) / 2;
    let gd = gx.data_mut();
    let cd = dcols.data();
    for f in 0..spec.frames {
        let base = (f * fs) as i64;
        for ci in 0..spec.c_in {
            let grow = &mut gd[ci * len..(ci + 1) * len];
            for kk in 0..spec.k {
                let shift = base + kk as i64 - pad as i64;
                let lo = (-shift).clamp(0, fs as i64) as usize;
                let hi = (len as i64 - shift).clamp(lo as i64, fs as i64) as usize;
                if hi > lo {
                    let src_off = (f * cik + ci * spec.k + kk) * fs;
                    let dst = (lo as i64 + shift) as usize;
                    for (o, &c) in grow[dst..dst + hi - lo]
                        .iter_mut()
                        .zip(&cd[src_off + lo..src_off + hi])
                    {
                        *o += c;
                    }
                }
            }
        }
    }
}

fn conv2d_backward<S: Scalar>(
    tape: &mut Tape<S>,
    g: &Tensor<S>,
    x: usize,
    w: usize,
    bias: Option<usize>,
    spec: &Conv2dSpec,
    cols: &Tensor<S>,
) {
    let kdim = spec.c_in * spec.kh * spec.kw;
    let npos = spec.h_out * spec.w_out;

    if let Some(b) = bias {
        if tape.nodes[b].requires_grad {
            let gb = ensure_grad(tape, b);
            for c in 0..spec.c_out {
                let mut acc = S::ZERO;
                for &gv in &g.data()[c * npos..(c + 1) * npos] {
                    acc += gv;
                }
                gb.data_mut()[c] += acc;
            }
        }
    }
    if tape.nodes[w].requires_grad {
        let gw = ensure_grad(tape, w);
        S::gemm(
            spec.c_out,
            npos,
            kdim,
            S::ONE,
            g.data(),
            npos as isize,
            1,
            cols.data(),
            1,
            npos as isize,
            S::ONE,
            gw.data_mut(),
            kdim as isize,
            1,
        );
    }
    if tape.nodes[x].requires_grad {
        let wv = tape.nodes[w].value.clone();
        let mut dcols = Tensor::zeros(&[kdim, npos]);
        S::gemm(
            kdim,
            spec.c_out,
            npos,
            S::ONE,
            wv.data(),
            1,
            kdim as isize,
            g.data(),
            npos as isize,
            1,
            S::ZERO,
            dcols.data_mut(),
            npos as isize,
            1,
        );
        let gx = ensure_grad(tape, x);
        col2im2d_add(gx, &dcols, spec);
    }
}

// ---------------------------------------------------------------------------
// Value-level helpers
// ---------------------------------------------------------------------------

fn broadcast_kind(a: &[usize], b: &[usize]) -> Broadcast {
    if a == b {
        Broadcast::None
    } else if b.iter().product::<usize>() == 1 {
        Broadcast::Scalar
    } else if b.len() == 1 && a.last() == Some(&b[0]) {
        Broadcast::Row
    } else {
        panic!("incompatible shapes for elementwise op: {a:?} vs {b:?}");
    }
}

fn apply_binary<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    bc: Broadcast,
    f: impl Fn(S, S) -> S,
) -> Tensor<S> {
    let mut out = a.clone();
    match bc {
        Broadcast::None => {
            for (o, &y) in out.data_mut().iter_mut().zip(b.data()) {
                *o = f(*o, y);
            }
        }
        Broadcast::Scalar => {
            let y = b.data()[0];
            for o in out.data_mut() {
                *o = f(*o, y);
            }
        }
        Broadcast::Row => {
            let n = b.numel();
            for row in out.data_mut().chunks_exact_mut(n) {
                for (o, &y) in row.iter_mut().zip(b.data()) {
                    *o = f(*o, y);
                }
            }
        }
    }
    out
}

/// Reduce a full-shaped gradient back to the broadcast operand's shape.
fn reduce_broadcast<S: Scalar>(g: &Tensor<S>, bc: Broadcast) -> Tensor<S> {
    match bc {
        Broadcast::None => g.clone(),
        Broadcast::Scalar => {
            let mut acc = S::ZERO;
            for &x in g.data() {
                acc += x;
            }
            Tensor::scalar(acc)
        }
        Broadcast::Row => {
            let n = *g.shape().last().unwrap();
            let mut out = Tensor::zeros(&[n]);
            for row in g.data().chunks_exact(n) {
                for (o, &x) in out.data_mut().iter_mut().zip(row) {
                    *o += x;
                }
            }
            out
        }
    }
}

fn zip_map<S: Scalar>(g: &Tensor<S>, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(g.shape(), other.shape());
    let mut out = g.clone();
    for (o, &x) in out.data_mut().iter_mut().zip(other.data()) {
        *o = f(*o, x);
    }
    out
}

fn transpose2d<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let s = a.shape();
    assert_eq!(s.len(), 2, "transpose expects 2-D, got {:?}", s);
    let (r, c) = (s[0], s[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = a.data()[i * c + j];
        }
    }
    out
}

/// (outer, axis_len, inner) strides decomposition for axis-wise ops.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer: usize = shape[..axis].iter().product();
    let alen = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, alen, inner)
}

fn slice_tensor<S: Scalar>(a: &Tensor<S>, axis: usize, start: usize, len: usize) -> Tensor<S> {
    let shape = a.shape();
    let (outer, alen, inner) = axis_split(shape, axis);
    assert!(
        start + len <= alen,
        "slice [{start}, {}) out of range for axis length {alen}",
        start + len
    );
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut out = Tensor::zeros(&out_shape);
    for o in 0..outer {
        let src = (o * alen + start) * inner;
        let dst = o * len * inner;
        out.data_mut()[dst..dst + len * inner]
            .copy_from_slice(&a.data()[src..src + len * inner]);
    }
    out
}

fn scatter_slice_add<S: Scalar>(
    target: &mut Tensor<S>,
    g: &Tensor<S>,
    src_shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) {
    let (outer, alen, inner) = axis_split(src_shape, axis);
    for o in 0..outer {
        let dst = (o * alen + start) * inner;
        let src = o * len * inner;
        let t = &mut target.data_mut()[dst..dst + len * inner];
        let s = &g.data()[src..src + len * inner];
        for (tv, &sv) in t.iter_mut().zip(s) {
            *tv += sv;
        }
    }
}

fn concat_tensors<S: Scalar>(parts: &[&Tensor<S>], axis: usize) -> Tensor<S> {
    let first = parts[0].shape();
    let mut total = 0usize;
    for p in parts {
        let s = p.shape();
        assert_eq!(s.len(), first.len(), "concat rank mismatch");
        for (d, (&a, &b)) in first.iter().zip(s.iter()).enumerate() {
            if d != axis {
                assert_eq!(a, b, "concat shape mismatch off-axis: {first:?} vs {s:?}");
            }
        }
        total += s[axis];
    }
    let mut out_shape = first.to_vec();
    out_shape[axis] = total;
    let (outer, _, inner) = axis_split(&out_shape, axis);
    let mut out = Tensor::zeros(&out_shape);
    for o in 0..outer {
        let mut off = 0usize;
        for p in parts {
            let plen = p.shape()[axis];
            let src = o * plen * inner;
            let dst = (o * total + off) * inner;
            out.data_mut()[dst..dst + plen * inner]
                .copy_from_slice(&p.data()[src..src + plen * inner]);
            off += plen;
        }
    }
    out
}

/// Reflect `pos` into `[0, len)` bouncing off both ends without repeating the
/// edge samples. Total for every input.
fn reflect_index(mut pos: i64, len: i64) -> i64 {
    if len == 1 {
        return 0;
    }
    loop {
        if pos < 0 {
            pos = -pos;
        } else if pos >= len {
            pos = 2 * (len - 1) - pos;
        } else {
            return pos;
        }
    }
}

/// Output-column range `[lo, hi)` whose input index `ow*stride + shift`
/// falls inside `[0, w_in)`.
fn valid_ow_range(shift: i64, stride: usize, w_in: usize, w_out: usize) -> (usize, usize) {
    let s = stride as i64;
    let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
    let hi = (w_in as i64 - shift + s - 1) / s;
    let lo = lo.clamp(0, w_out as i64) as usize;
    let hi = hi.clamp(lo as i64, w_out as i64) as usize;
    (lo, hi)
}

fn im2col1d<S: Scalar>(x: &Tensor<S>, spec: &Conv1dSpec) -> Tensor<S> {
    let gc_in = spec.c_in / spec.groups;
    let gk = gc_in * spec.k;
    let mut cols = Tensor::zeros(&[spec.groups * gk, spec.w_out]);
    let xd = x.data();
    let cd = cols.data_mut();
    for grp in 0..spec.groups {
        for ci in 0..gc_in {
            let xrow = &xd[(grp * gc_in + ci) * spec.w_in..(grp * gc_in + ci + 1) * spec.w_in];
            for kk in 0..spec.k {
                let crow_off = ((grp * gc_in + ci) * spec.k + kk) * spec.w_out;
                let shift = (kk * spec.dilation) as i64 - spec.padding as i64;
                let (lo, hi) = valid_ow_range(shift, spec.stride, spec.w_in, spec.w_out);
                if spec.stride == 1 {
                    let src = (lo as i64 + shift) as usize;
                    cd[crow_off + lo..crow_off + hi]
                        .copy_from_slice(&xrow[src..src + (hi - lo)]);
                } else {
                    for ow in lo..hi {
                        let iw = (ow as i64 * spec.stride as i64 + shift) as usize;
                        cd[crow_off + ow] = xrow[iw];
                    }
                }
            }
        }
    }
    cols
}

fn col2im1d_add<S: Scalar>(gx: &mut Tensor<S>, dcols: &Tensor<S>, spec: &Conv1dSpec) {
    let gc_in = spec.c_in / spec.groups;
    let gd = gx.data_mut();
    let cd = dcols.data();
    for grp in 0..spec.groups {
        for ci in 0..gc_in {
            let xrow_off = (grp * gc_in + ci) * spec.w_in;
            for kk in 0..spec.k {
                let crow_off = ((grp * gc_in + ci) * spec.k + kk) * spec.w_out;
                let shift = (kk * spec.dilation) as i64 - spec.padding as i64;
                let (lo, hi) = valid_ow_range(shift, spec.stride, spec.w_in, spec.w_out);
                if spec.stride == 1 {
                    let src = (lo as i64 + shift) as usize;
                    let dst = &mut gd[xrow_off + src..xrow_off + src + (hi - lo)];
                    for (d, &c) in dst.iter_mut().zip(&cd[crow_off + lo..crow_off + hi]) {
                        *d += c;
                    }
                } else {
                    for ow in lo..hi {
                        let iw = (ow as i64 * spec.stride as i64 + shift) as usize;
                        gd[xrow_off + iw] += cd[crow_off + ow];
                    }
                }
            }
        }
    }
}

fn im2col2d<S: Scalar>(x: &Tensor<S>, spec: &Conv2dSpec) -> Tensor<S> {
    let kdim = spec.c_in * spec.kh * spec.kw;
    let npos = spec.h_out * spec.w_out;
    let mut cols = Tensor::zeros(&[kdim, npos]);
    let xd = x.data();
    let cd = cols.data_mut();
    for ci in 0..spec.c_in {
        for kh in 0..spec.kh {
            for kw in 0..spec.kw {
                let crow_off = ((ci * spec.kh + kh) * spec.kw + kw) * npos;
                for oh in 0..spec.h_out {
                    let ih = (oh * spec.sh + kh) as i64 - spec.ph as i64;
                    if ih < 0 || ih as usize >= spec.h_in {
                        continue;
                    }
                    let xrow = &xd[(ci * spec.h_in + ih as usize) * spec.w_in..];
                    for ow in 0..spec.w_out {
                        let iw = (ow * spec.sw + kw) as i64 - spec.pw as i64;
                        if iw >= 0 && (iw as usize) < spec.w_in {
                            cd[crow_off + oh * spec.w_out + ow] = xrow[iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im2d_add<S: Scalar>(gx: &mut Tensor<S>, dcols: &Tensor<S>, spec: &Conv2dSpec) {
    let npos = spec.h_out * spec.w_out;
    let gd = gx.data_mut();
    let cd = dcols.data();
    for ci in 0..spec.c_in {
        for kh in 0..spec.kh {
            for kw in 0..spec.kw {
                let crow_off = ((ci * spec.kh + kh) * spec.kw + kw) * npos;
                for oh in 0..spec.h_out {
                    let ih = (oh * spec.sh + kh) as i64 - spec.ph as i64;
                    if ih < 0 || ih as usize >= spec.h_in {
                        continue;
                    }
                    let grow_off = (ci * spec.h_in + ih as usize) * spec.w_in;
                    for ow in 0..spec.w_out {
                        let iw = (ow * spec.sw + kw) as i64 - spec.pw as i64;
                        if iw >= 0 && (iw as usize) < spec.w_in {
                            gd[grow_off + iw as usize] += cd[crow_off + oh * spec.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

/// tanh-form GELU. The tanh is evaluated as `1 - 2/(exp(2u) + 1)`, which is
/// several times cheaper than libm tanh and shares its exact limit behavior
/// (exp overflow saturates cleanly to +-1).
#[inline]
fn gelu_tanh<S: Scalar>(u: S) -> S {
    let two = S::from_f64(2.0);
    S::ONE - two / ((two * u).fast_exp() + S::ONE)
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::ONE + gelu_tanh(u))
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = gelu_tanh(u);
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c * (S::ONE + three * a * x * x)
}
