//! Gradient saliency export: per-member loss-input-gradients at one test
//! example as min/max-normalized grayscale images, plus the pairwise
//! cosine table between members' gradients.

use std::path::{Path, PathBuf};

use crate::attacks::attack_loss;
use crate::autodiff::{grad, GradRequest, Scalar, Tape, Tensor};
use crate::ensemble::{EnsembleHandle, EnsembleMember};
use crate::error::{Error, Result};
use crate::loss::layer_pair_similarity;
use crate::rng;

use super::attack_eval::load_ensemble;
use super::config::ExperimentConfig;
use super::report::write_string;

/// Gradient of one member's cross-entropy at a single example, shaped like
/// the example.
fn member_loss_gradient(member: &EnsembleMember, x: &Tensor, label: usize) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let tape = Tape::new();
    let xv = tape.input(x.reshaped(&shape));
    let solo = EnsembleHandle::new(vec![member.clone()])?;
    let loss = attack_loss(&solo, &xv, &[label])?.sum_all();
    let g = grad(&GradRequest { output: loss, wrt: vec![xv], create_graph: false })?;
    tape.check()?;
    Ok(g[0].value().reshaped(x.shape()))
}

/// Min/max-normalize a `[c, h, w]` gradient (channel-averaged) into
/// `[0, 255]` grayscale bytes, row-major.
fn to_grayscale(gradient: &Tensor) -> (usize, usize, Vec<u8>) {
    assert_eq!(gradient.rank(), 3, "saliency needs [c, h, w]");
    let (c, h, w) = (gradient.shape()[0], gradient.shape()[1], gradient.shape()[2]);
    let mut plane = vec![0.0 as Scalar; h * w];
    for ch in 0..c {
        for p in 0..h * w {
            plane[p] += gradient.data()[ch * h * w + p] / c as Scalar;
        }
    }
    let lo = plane.iter().copied().fold(Scalar::INFINITY, Scalar::min);
    let hi = plane.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let range = (hi - lo).max(Scalar::MIN_POSITIVE);
    let bytes = plane
        .iter()
        .map(|&v| (((v - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    (h, w, bytes)
}

pub struct GradvizOutput {
    pub out_dir: PathBuf,
    pub image_paths: Vec<PathBuf>,
    /// Cosine similarity between members' flattened gradients,
    /// `cosines[i][j]`, diagonal exactly 1.
    pub cosines: Vec<Vec<Scalar>>,
}

/// Per-member saliency of one test example plus the member-pair cosine
/// table. In-memory variant of `cmd_gradviz` (no files written).
pub fn saliency_for_example(
    ensemble: &EnsembleHandle,
    x: &Tensor,
    label: usize,
) -> Result<(Vec<Tensor>, Vec<Vec<Scalar>>)> {
    if x.rank() != 3 {
        return Err(Error::contract(format!(
            "gradient saliency needs an image-shaped example [c, h, w], got {:?}",
            x.shape()
        )));
    }
    let grads: Vec<Tensor> = ensemble
        .members()
        .iter()
        .map(|m| member_loss_gradient(m, x, label))
        .collect::<Result<_>>()?;
    let n = grads.len();
    let mut cosines = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            cosines[i][j] = if i == j {
                1.0
            } else {
                layer_pair_similarity(&grads[i], &grads[j], 1e-12)
            };
        }
    }
    Ok((grads, cosines))
}

/// Export saliency PNGs and the cosine CSV for one example of one seed's
/// checkpoint into `<run>/saliency/seed_<k>_example_<index>/`.
pub fn cmd_gradviz(
    config: &ExperimentConfig,
    run_dir: &Path,
    seed: u64,
    example_index: usize,
) -> Result<GradvizOutput> {
    config.validate()?;
    if !config.dataset.is_image() {
        return Err(Error::contract("gradviz needs an image-shaped dataset"));
    }
    let ensemble = load_ensemble(run_dir, config, seed)?;
    let (_, test) = config.dataset.build(seed)?;
    let subset = test.subsample(config.evaluation.sample_count, rng::mix(&[seed, 0x6576616c]));
    if example_index >= subset.len() {
        return Err(Error::contract(format!(
            "example index {example_index} out of {} evaluation examples",
            subset.len()
        )));
    }
    let x = subset.inputs.example(example_index);
    let label = subset.labels[example_index];
    let (grads, cosines) = saliency_for_example(&ensemble, &x, label)?;

    let out_dir = run_dir.join("saliency").join(format!("seed_{seed}_example_{example_index}"));
    std::fs::create_dir_all(&out_dir)?;

    let mut image_paths = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        let (h, w, bytes) = to_grayscale(g);
        let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer matches dimensions");
        let path = out_dir.join(format!("member_{i}.png"));
        img.save(&path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        image_paths.push(path);
    }

    let mut csv = String::from("i,j,cosine\n");
    for (i, row) in cosines.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            csv.push_str(&format!("{i},{j},{v}\n"));
        }
    }
    write_string(&out_dir.join("cosines.csv"), &csv)?;

    Ok(GradvizOutput { out_dir, image_paths, cosines })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ModelSpec};

    #[test]
    fn saliency_diagonal_is_one_and_matrix_is_symmetric() {
        let spec = ModelSpec {
            input_shape: vec![1, 6, 6],
            layers: vec![
                crate::nn::LayerSpec::Flatten,
                crate::nn::LayerSpec::Dense { input: 36, output: 8, activation: Activation::Tanh },
                crate::nn::LayerSpec::Dense { input: 8, output: 2, activation: Activation::Identity },
            ],
            num_classes: 2,
            tap_layers: vec![1],
        };
        let ens = EnsembleHandle::init(&spec, 3, 7).unwrap();
        let data = crate::data::synth_images(4, 2, 6, 0.1, 3);
        let x = data.inputs.example(0);
        let (grads, cos) = saliency_for_example(&ens, &x, data.labels[0]).unwrap();
        assert_eq!(grads.len(), 3);
        for i in 0..3 {
            assert_eq!(cos[i][i], 1.0);
            for j in 0..3 {
                assert!((cos[i][j] - cos[j][i]).abs() < 1e-12);
                assert!(cos[i][j] <= 1.0 + 1e-9 && cos[i][j] >= -1.0 - 1e-9);
            }
        }
    }

    #[test]
    fn grayscale_normalization_spans_full_range() {
        let g = Tensor::from_vec(vec![1, 2, 2], vec![-0.3, 0.0, 0.1, 0.5]);
        let (h, w, bytes) = to_grayscale(&g);
        assert_eq!((h, w), (2, 2));
        assert_eq!(*bytes.iter().min().unwrap(), 0);
        assert_eq!(*bytes.iter().max().unwrap(), 255);
    }

    #[test]
    fn flat_example_is_a_contract_violation() {
        let spec = ModelSpec::mlp(&[2, 4, 2], Activation::Tanh);
        let ens = EnsembleHandle::init(&spec, 2, 1).unwrap();
        let x = Tensor::from_vec(vec![2], vec![0.3, 0.4]);
        assert!(matches!(
            saliency_for_example(&ens, &x, 0),
            Err(Error::Contract(_))
        ));
    }
}
