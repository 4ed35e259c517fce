//! Batchnorm folding into the preceding convolution.

use crate::engine::{Layer, ModelGraph, Op};
use crate::error::Result;
use crate::tensor::Tensor;

/// Folds every batchnorm whose input is a conv2d consumed by nothing else.
/// The conv keeps its id; consumers of the batchnorm are rewired to it.
pub fn fold_batchnorm(graph: &ModelGraph) -> Result<ModelGraph> {
    let layers = graph.layers();
    let mut fold_into: Vec<Option<usize>> = vec![None; layers.len()];
    for (i, layer) in layers.iter().enumerate() {
        let Op::BatchNorm { .. } = layer.op else {
            continue;
        };
        let Some(src) = graph.layer_index(&layer.inputs[0]) else {
            continue;
        };
        if matches!(layers[src].op, Op::Conv2d { .. }) && graph.consumers(src) == [i] {
            fold_into[i] = Some(src);
        }
    }
    if fold_into.iter().all(Option::is_none) {
        return Ok(graph.clone());
    }

    let mut out: Vec<Layer> = layers.to_vec();
    let mut renames: Vec<(String, String)> = Vec::new();
    for (bn_idx, conv_idx) in fold_into.iter().enumerate() {
        let Some(conv_idx) = *conv_idx else { continue };
        let Op::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            epsilon,
        } = &layers[bn_idx].op
        else {
            unreachable!()
        };
        let Op::Conv2d {
            weight,
            bias,
            stride,
            padding,
        } = &layers[conv_idx].op
        else {
            unreachable!()
        };
        let oc = weight.shape()[0];
        let per_out = weight.numel() / oc;
        let factors: Vec<f32> = (0..oc)
            .map(|c| gamma.data()[c] / (running_var.data()[c] + epsilon).sqrt())
            .collect();
        let mut w = weight.clone();
        for (c, chunk) in w.data_mut().chunks_mut(per_out).enumerate() {
            for v in chunk {
                *v *= factors[c];
            }
        }
        let b = Tensor::from_fn(vec![oc], |c| {
            let b0 = bias.as_ref().map_or(0.0, |b| b.data()[c]);
            (b0 - running_mean.data()[c]) * factors[c] + beta.data()[c]
        });
        out[conv_idx].op = Op::Conv2d {
            weight: w,
            bias: Some(b),
            stride: *stride,
            padding: *padding,
        };
        renames.push((layers[bn_idx].id.clone(), layers[conv_idx].id.clone()));
    }

    let folded: Vec<Layer> = out
        .into_iter()
        .enumerate()
        .filter(|(i, _)| fold_into[*i].is_none())
        .map(|(_, mut l)| {
            for input in &mut l.inputs {
                if let Some((_, to)) = renames.iter().find(|(from, _)| from == input) {
                    *input = to.clone();
                }
            }
            l
        })
        .collect();
    let (name, input_shape, _, class_names, preprocess) = graph.clone().into_parts();
    ModelGraph::new(name, input_shape, folded, class_names, preprocess)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{forward, ExecMode, INPUT};

    #[test]
    fn folded_conv_matches_unfolded() {
        let conv = Op::Conv2d {
            weight: Tensor::from_fn(vec![2, 1, 3, 3], |i| (i as f32 * 0.7).sin()),
            bias: None,
            stride: 1,
            padding: 1,
        };
        let bn = Op::BatchNorm {
            gamma: Tensor::new(vec![2], vec![1.5, -0.5]).unwrap(),
            beta: Tensor::new(vec![2], vec![0.1, 0.2]).unwrap(),
            running_mean: Tensor::new(vec![2], vec![0.3, -0.4]).unwrap(),
            running_var: Tensor::new(vec![2], vec![0.5, 2.0]).unwrap(),
            epsilon: 1e-5,
        };
        let g = ModelGraph::new(
            "bn",
            vec![1, 4, 4],
            vec![
                Layer::new("conv", &[INPUT], conv),
                Layer::new("bn", &["conv"], bn),
                Layer::new("act", &["bn"], Op::Relu),
                Layer::new("pool", &["act"], Op::GlobalAvgPool),
            ],
            None,
            None,
        )
        .unwrap();
        let f = fold_batchnorm(&g).unwrap();
        assert_eq!(f.layers().len(), 3);
        assert_eq!(f.layers()[1].inputs, vec!["conv".to_string()]);
        let x = Tensor::from_fn(vec![2, 1, 4, 4], |i| (i as f32 * 0.31).cos());
        let a = forward(&g, &x, ExecMode::Fp32).unwrap();
        let b = forward(&f, &x, ExecMode::Fp32).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-5);
        }
    }
}
