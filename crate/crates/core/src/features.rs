//! Region projection and assembly of the concatenated encoder input
//! `<img> r1 … rR </img> <bos> w1 … wT <eos>`.

use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::vocab::Special;

/// Pooled detector feature of one image region. The confidence is kept for
/// fidelity with detector output but the model does not read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionFeature {
    pub vector: Vec<f64>,
    pub confidence: f64,
}

/// Stacks region vectors into an `R × feature_dim` tensor, replacing the
/// regions listed in `zeroed` by zero vectors.
pub fn region_matrix(regions: &[RegionFeature], feature_dim: usize, zeroed: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(regions.len() * feature_dim);
    for (i, r) in regions.iter().enumerate() {
        if r.vector.len() != feature_dim {
            bail!(Dimension, "region {} has {} features, model expects {}", i, r.vector.len(), feature_dim);
        }
        if zeroed.contains(&i) {
            data.extend(core::iter::repeat_n(0.0, feature_dim));
        } else {
            data.extend_from_slice(&r.vector);
        }
    }
    Tensor::matrix(regions.len(), feature_dim, data)
}

/// Projects `R × feature_dim` region features with `weight` (`feature_dim ×
/// d`) and `bias` (`d`), giving one `d`-vector per region as a row.
pub fn project_regions(g: &mut Graph, regions: Var, weight: Var, bias: Var) -> Result<Var> {
    let fin = g.value(regions).cols();
    if g.value(weight).rows() != fin {
        bail!(Dimension, "regions have {} features but the projection expects {}", fin, g.value(weight).rows());
    }
    let v = g.matmul(regions, weight)?;
    g.add_row(v, bias)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    ImgStart,
    Region(usize),
    ImgEnd,
    Bos,
    Token(usize),
    Eos,
}

impl Slot {
    pub fn is_visual(self) -> bool {
        matches!(self, Slot::ImgStart | Slot::Region(_) | Slot::ImgEnd)
    }
}

/// Slot structure of an encoder input of `R` regions and `T` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputLayout {
    pub slots: Vec<Slot>,
    pub region_count: usize,
    pub text_len: usize,
}

impl InputLayout {
    pub fn new(region_count: usize, token_ids: &[usize]) -> Self {
        let mut slots = Vec::with_capacity(region_count + token_ids.len() + 4);
        slots.push(Slot::ImgStart);
        slots.extend((0..region_count).map(Slot::Region));
        slots.push(Slot::ImgEnd);
        slots.push(Slot::Bos);
        slots.extend(token_ids.iter().map(|&t| Slot::Token(t)));
        slots.push(Slot::Eos);
        Self { slots, region_count, text_len: token_ids.len() }
    }

    /// Always `R + T + 4`.
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// 0-based slots of the region vectors.
    pub fn visual_range(&self) -> Range<usize> {
        1..1 + self.region_count
    }

    /// 0-based slots of the text tokens: `R + 3 .. R + 3 + T`, after
    /// `<img>`, the regions, `</img>` and `<bos>`.
    pub fn text_range(&self) -> Range<usize> {
        self.region_count + 3..self.region_count + 3 + self.text_len
    }

    pub fn token_ids(&self) -> Vec<usize> {
        self.slots[self.text_range()]
            .iter()
            .map(|s| match s {
                Slot::Token(t) => *t,
                _ => unreachable!("text range only holds tokens"),
            })
            .collect()
    }
}

/// Concatenated encoder input before position and modality embeddings.
#[derive(Debug, Clone)]
pub struct MultimodalInput {
    pub embeddings: Var,
    pub layout: InputLayout,
}

/// Builds the `(R + T + 4) × d` input: boundary slots use the special-token
/// rows of `embed`, text slots the token rows, region slots `projected`.
pub fn assemble_input(g: &mut Graph, projected: Var, token_ids: &[usize], embed: Var) -> Result<MultimodalInput> {
    let r = g.value(projected).rows();
    if g.value(projected).cols() != g.value(embed).cols() {
        bail!(Dimension, "projected regions and embeddings differ in width");
    }
    let head = g.gather_rows(embed, &[Special::Img.id()])?;
    let mut tail_ids = Vec::with_capacity(token_ids.len() + 3);
    tail_ids.extend([Special::ImgEnd.id(), Special::Bos.id()]);
    tail_ids.extend_from_slice(token_ids);
    tail_ids.push(Special::Eos.id());
    let tail = g.gather_rows(embed, &tail_ids)?;
    let parts = if r == 0 { alloc::vec![head, tail] } else { alloc::vec![head, projected, tail] };
    let embeddings = g.concat_rows(&parts)?;
    Ok(MultimodalInput { embeddings, layout: InputLayout::new(r, token_ids) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_bias_columns() {
        let mut g = Graph::new();
        let regions = g.constant(Tensor::uniform(&[5, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let w = g.constant(Tensor::zeros(&[4, 3]));
        let b = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let v = project_regions(&mut g, regions, w, b).unwrap();
        for i in 0..5 {
            assert_eq!(g.value(v).row(i), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn identity_projection_keeps_features() {
        let mut g = Graph::new();
        let x = Tensor::uniform(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let regions = g.constant(x.clone());
        let w = g.constant(Tensor::eye(4));
        let b = g.constant(Tensor::zeros(&[4]));
        let v = project_regions(&mut g, regions, w, b).unwrap();
        assert_eq!(g.value(v), &x);

        let bad = g.constant(Tensor::eye(3));
        assert!(project_regions(&mut g, regions, bad, b).is_err());
    }

    #[test]
    fn projection_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = [
            Tensor::uniform(&[4, 5], 1.0, &mut rng),
            Tensor::uniform(&[5, 3], 1.0, &mut rng),
            Tensor::uniform(&[3], 1.0, &mut rng),
        ];
        let err = grad_check(
            |g, v| {
                let p = project_regions(g, v[0], v[1], v[2])?;
                let q = g.mul(p, p)?;
                Ok(g.sum(q))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn layout_arithmetic() {
        let ids: Vec<usize> = (40..50).collect();
        let l = InputLayout::new(36, &ids);
        assert_eq!(l.len(), 50);
        assert_eq!(l.text_range(), 39..49);
        assert_eq!(l.token_ids(), ids);
        assert_eq!(InputLayout::new(1, &[40]).len(), 6);
    }

    #[test]
    fn assembly_slot_order() {
        let mut g = Graph::new();
        let vocab = 30;
        let table = Tensor::new(vec![vocab, 2], (0..vocab * 2).map(|x| x as f64).collect()).unwrap();
        let embed = g.constant(table.clone());
        let proj = g.constant(Tensor::filled(&[2, 2], -1.0));
        let input = assemble_input(&mut g, proj, &[25, 26], embed).unwrap();
        let x = g.value(input.embeddings);
        assert_eq!(x.rows(), 2 + 2 + 4);
        assert_eq!(x.row(0), table.row(Special::Img.id()));
        assert_eq!(x.row(1), &[-1.0, -1.0]);
        assert_eq!(x.row(3), table.row(Special::ImgEnd.id()));
        assert_eq!(x.row(4), table.row(Special::Bos.id()));
        assert_eq!(x.row(5), table.row(25));
        assert_eq!(x.row(7), table.row(Special::Eos.id()));
        assert_eq!(input.layout.token_ids(), vec![25, 26]);
    }
}
