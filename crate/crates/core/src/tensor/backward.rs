use super::{Graph, Op, Tensor};
use crate::error::{Error, Result};

/// Gradients of a scalar `loss` with respect to each tensor in `wrt`.
///
/// With `create_graph` the backward computation is itself recorded, so the
/// returned tensors can be differentiated again. Tensors that `loss` does not
/// depend on get a zero gradient.
pub fn grad(loss: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    for t in wrt {
        loss.check_graph(t)?;
    }
    let grads = propagate(loss, create_graph)?;
    Ok(wrt
        .iter()
        .map(|t| {
            grads
                .get(t.id)
                .cloned()
                .flatten()
                .unwrap_or_else(|| loss.graph.zeros(&t.shape()))
        })
        .collect())
}

pub(super) fn backward(loss: &Tensor) -> Result<()> {
    let grads: Vec<(usize, std::rc::Rc<Vec<f64>>)> = propagate(loss, false)?
        .into_iter()
        .enumerate()
        .filter_map(|(id, g)| g.map(|g| (id, g.data())))
        .collect();
    let mut inner = loss.graph.inner.borrow_mut();
    for (id, values) in grads {
        let node = &mut inner.nodes[id];
        if !node.requires_grad {
            continue;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(values.iter()).for_each(|(a, v)| *a += v),
            None => node.grad = Some(values.as_ref().clone()),
        }
    }
    Ok(())
}

/// One reverse sweep over nodes `loss.id, loss.id - 1, ..., 0`.
fn propagate(loss: &Tensor, create_graph: bool) -> Result<Vec<Option<Tensor>>> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward needs a scalar, got shape {:?}",
            loss.shape()
        )));
    }
    let graph = loss.graph.clone();
    let previous = graph.set_recording(create_graph);
    let result = sweep(&graph, loss);
    graph.set_recording(previous);
    result
}

fn sweep(graph: &Graph, loss: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let n = loss.id + 1;
    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    grads[loss.id] = Some(graph.push_leaf(vec![1.0], loss.shape(), false));
    for id in (0..n).rev() {
        let Some(g) = grads[id].clone() else { continue };
        let (op, requires_grad) = {
            let inner = graph.inner.borrow();
            (inner.nodes[id].op.clone(), inner.nodes[id].requires_grad)
        };
        if !requires_grad {
            continue;
        }
        for (parent, pg) in vjp(graph, id, &op, &g)? {
            if !graph.inner.borrow().nodes[parent].requires_grad {
                continue;
            }
            grads[parent] = Some(match grads[parent].take() {
                Some(acc) => acc.add(&pg)?,
                None => pg,
            });
        }
    }
    Ok(grads)
}

/// Sums a broadcast gradient back down to a single-element parent shape.
fn reduce_to(g: Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        Ok(g)
    } else {
        g.sum_all().reshape(shape)
    }
}

fn vjp(graph: &Graph, id: usize, op: &Op, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let node = |i: usize| graph.handle(i);
    let out = node(id);
    Ok(match *op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![
            (a, reduce_to(g.clone(), &node(a).shape())?),
            (b, reduce_to(g.clone(), &node(b).shape())?),
        ],
        Op::Sub(a, b) => vec![
            (a, reduce_to(g.clone(), &node(a).shape())?),
            (b, reduce_to(g.neg(), &node(b).shape())?),
        ],
        Op::Mul(a, b) => {
            let (ta, tb) = (node(a), node(b));
            vec![
                (a, reduce_to(g.mul(&tb)?, &ta.shape())?),
                (b, reduce_to(g.mul(&ta)?, &tb.shape())?),
            ]
        }
        Op::Div(a, b) => {
            let (ta, tb) = (node(a), node(b));
            // d(a/b)/db = -(a/b)/b
            vec![
                (a, reduce_to(g.div(&tb)?, &ta.shape())?),
                (b, reduce_to(g.mul(&out)?.div(&tb)?.neg(), &tb.shape())?),
            ]
        }
        Op::Scale(a, c) => vec![(a, g.scale(c))],
        Op::Relu(a) => {
            let ta = node(a);
            let mask: Vec<f64> = ta.data().iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
            let mask = graph.push_leaf(mask, ta.shape(), false);
            vec![(a, g.mul(&mask)?)]
        }
        Op::Exp(a) => vec![(a, g.mul(&out)?)],
        Op::Log(a) => vec![(a, g.div(&node(a))?)],
        Op::Sqrt(a) => vec![(a, g.div(&out)?.scale(0.5))],
        Op::MatMul(a, b) => {
            let (ta, tb) = (node(a), node(b));
            vec![(a, g.matmul(&tb.t()?)?), (b, ta.t()?.matmul(g)?)]
        }
        Op::Transpose(a) => vec![(a, g.t()?)],
        Op::Reshape(a) => vec![(a, g.reshape(&node(a).shape())?)],
        Op::Sum { src, ref axes } => vec![(src, g.expand(&node(src).shape(), axes)?)],
        Op::Expand { src, ref axes } => vec![(src, g.sum(axes)?)],
    })
}
