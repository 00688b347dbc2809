//! Deterministic problem generators: Gaussian class clusters, the
//! forget/retain split, and seeded MLP initialization.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, ParameterVector, Tensor};
use crate::error::{arg_err, dim_err, Result};

/// Features `[n, d]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    features: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledBatch {
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if features.shape().len() != 2 {
            return Err(dim_err("features must be a matrix"));
        }
        if labels.len() != n {
            return Err(dim_err(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(arg_err(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(dim_err("selection is empty"));
        }
        let features = self.features.gather_rows(rows)?;
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Self::new(features, labels, self.class_count)
    }

    /// Concatenates two batches with the same feature width and class count.
    pub fn concat(&self, other: &LabeledBatch) -> Result<Self> {
        if self.dim() != other.dim() || self.class_count != other.class_count {
            return Err(dim_err("cannot concatenate batches of different shape"));
        }
        let mut data = self.features.data().to_vec();
        data.extend_from_slice(other.features.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let n = labels.len();
        Self::new(Tensor::matrix(n, self.dim(), data)?, labels, self.class_count)
    }

    /// Writes `f0,..,f{d-1},label` CSV.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.dim();
        let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (i, y) in self.labels.iter().enumerate() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(y.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV produced by [`LabeledBatch::write_csv`]. The class count is
    /// `max(label) + 1` unless given.
    pub fn read_csv<R: Read>(input: R, class_count: Option<usize>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let d = header.len().saturating_sub(1);
        let expected = (0..d).map(|j| format!("f{j}")).chain(std::iter::once("label".to_string()));
        if d == 0 || !header.iter().eq(expected) {
            return Err(arg_err(format!("unexpected dataset header {header:?}")));
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for field in rec.iter().take(d) {
                data.push(
                    field
                        .parse::<f64>()
                        .map_err(|e| arg_err(format!("bad feature {field:?}: {e}")))?,
                );
            }
            let y = &rec[d];
            labels.push(
                y.parse::<usize>()
                    .map_err(|e| arg_err(format!("bad label {y:?}: {e}")))?,
            );
        }
        if labels.is_empty() {
            return Err(dim_err("dataset has no rows"));
        }
        let k = class_count.unwrap_or_else(|| labels.iter().max().unwrap() + 1);
        let n = labels.len();
        Self::new(Tensor::matrix(n, d, data)?, labels, k)
    }
}

/// Retain set R and forget set F, partitioned by label.
#[derive(Clone, Debug)]
pub struct ForgetRetainSplit {
    pub retain: LabeledBatch,
    pub forget: LabeledBatch,
    pub forget_class: usize,
}

impl ForgetRetainSplit {
    pub fn total(&self) -> usize {
        self.retain.len() + self.forget.len()
    }

    pub fn pooled(&self) -> Result<LabeledBatch> {
        self.retain.concat(&self.forget)
    }
}

/// `classes` isotropic unit-variance clusters centered at `separation * e_k`.
/// Rows are ordered by class.
pub fn gen_gaussian_clusters(
    seed: u64,
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
) -> Result<LabeledBatch> {
    if classes < 2 {
        return Err(arg_err("need at least two classes"));
    }
    if per_class == 0 {
        return Err(arg_err("per_class must be positive"));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(arg_err(format!("separation {separation} must be positive")));
    }
    if dim < classes {
        return Err(arg_err(format!(
            "dim {dim} < classes {classes}: axis centers need distinct axes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..classes {
        for _ in 0..per_class {
            for j in 0..dim {
                let center = if j == k { separation } else { 0.0 };
                let z: f64 = rng.sample(StandardNormal);
                data.push(center + z);
            }
            labels.push(k);
        }
    }
    LabeledBatch::new(Tensor::matrix(n, dim, data)?, labels, classes)
}

pub fn split_forget_retain(data: &LabeledBatch, forget_class: usize) -> Result<ForgetRetainSplit> {
    let (forget_rows, retain_rows): (Vec<usize>, Vec<usize>) =
        (0..data.len()).partition(|&i| data.labels()[i] == forget_class);
    if forget_rows.is_empty() {
        return Err(arg_err(format!("class {forget_class} is absent from the data")));
    }
    if retain_rows.is_empty() {
        return Err(arg_err("every sample belongs to the forget class"));
    }
    Ok(ForgetRetainSplit {
        retain: data.select(&retain_rows)?,
        forget: data.select(&forget_rows)?,
        forget_class,
    })
}

/// Tanh MLP with Glorot-uniform weights and zero biases.
pub fn mlp_factory(seed: u64, layer_widths: &[usize]) -> Result<(Graph, ParameterVector)> {
    mlp_factory_with(seed, layer_widths, Activation::Tanh)
}

pub fn mlp_factory_with(
    seed: u64,
    layer_widths: &[usize],
    activation: Activation,
) -> Result<(Graph, ParameterVector)> {
    let graph = Graph::mlp(layer_widths, activation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(graph.layout().len());
    for seg in graph.layout().segments() {
        if seg.shape.len() == 2 {
            let (fan_in, fan_out) = (seg.shape[0], seg.shape[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            data.extend((0..seg.size()).map(|_| rng.random_range(-s..s)));
        } else {
            data.extend(std::iter::repeat_n(0.0, seg.size()));
        }
    }
    let params = ParameterVector::new(data, graph.layout().clone())?;
    Ok((graph, params))
}

/// The synthetic forget-one-class classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianTask {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    /// Hidden layer widths between the input and the logits.
    pub hidden: Vec<usize>,
    pub forget_class: usize,
}

impl Default for GaussianTask {
    fn default() -> Self {
        Self {
            classes: 3,
            per_class: 300,
            dim: 8,
            separation: 4.0,
            hidden: vec![16],
            forget_class: 0,
        }
    }
}

impl GaussianTask {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.dim];
        w.extend(&self.hidden);
        w.push(self.classes);
        w
    }

    pub fn generate(&self, data_seed: u64) -> Result<ForgetRetainSplit> {
        if self.forget_class >= self.classes {
            return Err(arg_err(format!(
                "forget_class {} outside [0, {})",
                self.forget_class, self.classes
            )));
        }
        let data = gen_gaussian_clusters(
            data_seed,
            self.classes,
            self.per_class,
            self.dim,
            self.separation,
        )?;
        split_forget_retain(&data, self.forget_class)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = gen_gaussian_clusters(5, 3, 20, 4, 2.0).unwrap();
        let b = gen_gaussian_clusters(5, 3, 20, 4, 2.0).unwrap();
        let bits = |x: &LabeledBatch| x.features().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = gen_gaussian_clusters(6, 3, 20, 4, 2.0).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn minimal_dataset() {
        let d = gen_gaussian_clusters(0, 2, 1, 2, 1.0).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels(), &[0, 1]);
    }

    #[test]
    fn generator_argument_errors() {
        assert!(gen_gaussian_clusters(0, 3, 10, 2, 1.0).is_err());
        assert!(gen_gaussian_clusters(0, 1, 10, 2, 1.0).is_err());
        assert!(gen_gaussian_clusters(0, 2, 0, 2, 1.0).is_err());
        assert!(gen_gaussian_clusters(0, 2, 1, 2, 0.0).is_err());
    }

    #[test]
    fn clusters_sit_on_their_axes() {
        let d = gen_gaussian_clusters(1, 3, 2000, 3, 10.0).unwrap();
        for k in 0..3 {
            let rows: Vec<usize> = (0..d.len()).filter(|&i| d.labels()[i] == k).collect();
            for j in 0..3 {
                let mean = rows.iter().map(|&i| d.features().row(i)[j]).sum::<f64>() / rows.len() as f64;
                let target = if j == k { 10.0 } else { 0.0 };
                assert!((mean - target).abs() < 0.1, "class {k} axis {j}: {mean}");
            }
        }
    }

    #[test]
    fn split_counts_and_membership() {
        let d = gen_gaussian_clusters(2, 3, 100, 3, 4.0).unwrap();
        let s = split_forget_retain(&d, 0).unwrap();
        assert_eq!(s.retain.len(), 200);
        assert_eq!(s.forget.len(), 100);
        assert!(s.forget.labels().iter().all(|&y| y == 0));
        assert!(s.retain.labels().iter().all(|&y| y != 0));
        assert!(split_forget_retain(&d, 5).is_err());
    }

    #[test]
    fn split_is_exact_complement() {
        let d = gen_gaussian_clusters(3, 4, 25, 4, 3.0).unwrap();
        let s = split_forget_retain(&d, 2).unwrap();
        let key = |b: &LabeledBatch, i: usize| {
            let mut k: Vec<u64> = b.features().row(i).iter().map(|v| v.to_bits()).collect();
            k.push(b.labels()[i] as u64);
            k
        };
        let mut orig: Vec<_> = (0..d.len()).map(|i| key(&d, i)).collect();
        let mut parts: Vec<_> = (0..s.retain.len())
            .map(|i| key(&s.retain, i))
            .chain((0..s.forget.len()).map(|i| key(&s.forget, i)))
            .collect();
        orig.sort();
        parts.sort();
        assert_eq!(orig, parts);
    }

    #[test]
    fn mlp_factory_shapes_and_determinism() {
        let (_, p) = mlp_factory(0, &[3, 3]).unwrap();
        assert_eq!(p.len(), 12);
        let (_, a) = mlp_factory(9, &[4, 16, 3]).unwrap();
        let (_, b) = mlp_factory(9, &[4, 16, 3]).unwrap();
        assert_eq!(a, b);
        let s = (6.0f64 / 20.0).sqrt();
        assert!(a.segment_data(0).iter().all(|v| v.abs() < s));
        assert!(a.segment_data(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn csv_round_trip() {
        let d = gen_gaussian_clusters(4, 2, 3, 2, 1.5).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("f0,f1,label\n"));
        let back = LabeledBatch::read_csv(buf.as_slice(), Some(2)).unwrap();
        assert_eq!(back, d);
        assert!(LabeledBatch::read_csv("a,b\n1,2\n".as_bytes(), None).is_err());
    }
}
