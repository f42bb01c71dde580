//! Level-wise fusion of the two backbone pyramids into a shared latent width.

use rayon::prelude::*;

use crate::csm::{BlockSpec, SymmetricCsm};
use crate::error::{HsqError, Result};
use crate::layers::Linear;
use crate::moe::RouterDecision;
use crate::numerics::rng::{stream_id, Init};
use crate::numerics::{Backend, Eval, Matrix, Module, Param};
use crate::pyramid::{FeaturePyramid, LEVELS};

/// Noise-stream tag of the projector, distinct from the query stages.
pub(crate) const PROJECTOR_STREAM: u64 = 1;

#[derive(Clone, Debug)]
pub struct ProjectorLevel {
    pub cnn_adapter: Linear,
    pub vit_adapter: Linear,
    pub embedding: Param,
    pub csm: SymmetricCsm,
    pub fuse: Linear,
}

impl Module for ProjectorLevel {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.cnn_adapter.params();
        p.extend(self.vit_adapter.params());
        p.push(&self.embedding);
        p.extend(self.csm.params());
        p.extend(self.fuse.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.cnn_adapter.params_mut();
        p.extend(self.vit_adapter.params_mut());
        p.push(&mut self.embedding);
        p.extend(self.csm.params_mut());
        p.extend(self.fuse.params_mut());
        p
    }
}

#[derive(Clone, Debug)]
pub struct Projector {
    pub levels: Vec<ProjectorLevel>,
}

pub struct ProjectedLevel<T> {
    pub latent: T,
    /// Routing of the cnn→vit and vit→cnn branches.
    pub decisions: [RouterDecision; 2],
}

impl Projector {
    pub fn new(
        cnn_channels: [usize; 4],
        vit_channels: [usize; 4],
        spec: &BlockSpec,
        init: &mut Init,
    ) -> Result<Self> {
        let d = spec.dim;
        let levels = (0..LEVELS)
            .map(|i| {
                let p = format!("projector.level{}", i + 1);
                Ok(ProjectorLevel {
                    cnn_adapter: Linear::new(&format!("{p}.cnn_adapter"), cnn_channels[i], d, init),
                    vit_adapter: Linear::new(&format!("{p}.vit_adapter"), vit_channels[i], d, init),
                    embedding: Param::new(format!("{p}.embedding"), init.trunc_normal(1, d)),
                    csm: SymmetricCsm::new(&format!("{p}.csm"), spec, init)?,
                    fuse: Linear::new(&format!("{p}.fuse"), 2 * d, d, init),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    pub fn dim(&self) -> usize {
        self.levels[0].fuse.outputs()
    }

    pub fn check_inputs(&self, cnn: &FeaturePyramid, vit: &FeaturePyramid) -> Result<()> {
        for i in 0..LEVELS {
            let (a, b) = (cnn.level(i), vit.level(i));
            let fail = |detail: String| Err(HsqError::Ingestion { level: i + 1, detail });
            if a.rows() != b.rows() {
                return fail(format!("cnn has {} tokens, vit has {}", a.rows(), b.rows()));
            }
            let l = &self.levels[i];
            if a.cols() != l.cnn_adapter.inputs() {
                return fail(format!(
                    "cnn has {} channels, projector expects {}",
                    a.cols(),
                    l.cnn_adapter.inputs()
                ));
            }
            if b.cols() != l.vit_adapter.inputs() {
                return fail(format!(
                    "vit has {} channels, projector expects {}",
                    b.cols(),
                    l.vit_adapter.inputs()
                ));
            }
        }
        Ok(())
    }

    /// Projects one level (0-based).
    pub fn project_level<B: Backend>(
        &self,
        b: &mut B,
        level: usize,
        cnn: &B::T,
        vit: &B::T,
        seed: u64,
    ) -> Result<ProjectedLevel<B::T>> {
        let l = &self.levels[level];
        let emb = b.param(&l.embedding);
        let a = l.cnn_adapter.forward(b, cnn)?;
        let a = b.add_row(&a, &emb)?;
        let v = l.vit_adapter.forward(b, vit)?;
        let v = b.add_row(&v, &emb)?;
        let key = |branch: u64| stream_id(seed, &[PROJECTOR_STREAM, level as u64, branch]);
        let (x, y) = l.csm.forward(b, &a, &v, (key(0), key(1)))?;
        let both = b.concat_cols(&[x.out, y.out])?;
        let latent = l.fuse.forward(b, &both)?;
        Ok(ProjectedLevel {
            latent,
            decisions: [x.decision, y.decision],
        })
    }

    /// Value-only projection of the enabled levels, run concurrently.
    pub fn project(
        &self,
        cnn: &FeaturePyramid,
        vit: &FeaturePyramid,
        enabled: [bool; 4],
        seed: u64,
    ) -> Result<Vec<Option<ProjectedLevel<std::sync::Arc<Matrix>>>>> {
        self.check_inputs(cnn, vit)?;
        (0..LEVELS)
            .into_par_iter()
            .map(|i| {
                if !enabled[i] {
                    return Ok(None);
                }
                let mut e = Eval;
                let c = e.constant(cnn.level(i).clone());
                let v = e.constant(vit.level(i).clone());
                self.project_level(&mut e, i, &c, &v, seed).map(Some)
            })
            .collect()
    }
}

impl Module for Projector {
    fn params(&self) -> Vec<&Param> {
        self.levels.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.levels.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// All four latent levels as plain matrices.
pub fn project(cnn: &FeaturePyramid, vit: &FeaturePyramid, p: &Projector) -> Result<Vec<Matrix>> {
    Ok(p
        .project(cnn, vit, [true; 4], 0)?
        .into_iter()
        .map(|l| l.expect("all levels enabled").latent.as_ref().clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{synth_pair, synth_pyramid};

    fn spec(d: usize) -> BlockSpec {
        let mut s = BlockSpec::new(d, 2, 1);
        s.hidden = 2 * d;
        s
    }

    fn projector(ch: [usize; 4], d: usize, seed: u64) -> Projector {
        Projector::new(ch, ch, &spec(d), &mut Init::new(seed, 0.2)).unwrap()
    }

    #[test]
    fn latent_shapes_follow_geometry() {
        let ch = [3, 4, 5, 6];
        let (c, v) = synth_pair(64, 32, ch, 1).unwrap();
        let out = project(&c, &v, &projector(ch, 8, 1)).unwrap();
        let shapes: Vec<_> = out.iter().map(Matrix::shape).collect();
        assert_eq!(shapes, vec![(128, 8), (32, 8), (8, 8), (2, 8)]);
    }

    #[test]
    fn token_mismatch_names_the_level() {
        let ch = [2; 4];
        let c = synth_pyramid(32, 32, ch, 1).unwrap();
        let v = synth_pyramid(64, 32, ch, 2).unwrap();
        let e = project(&c, &v, &projector(ch, 4, 2)).unwrap_err();
        assert!(matches!(e, HsqError::Ingestion { level: 1, .. }));
        let wide = synth_pyramid(32, 32, [2, 2, 2, 3], 2).unwrap();
        let e = project(&c, &wide, &projector(ch, 4, 2)).unwrap_err();
        assert!(matches!(e, HsqError::Ingestion { level: 4, .. }), "{e}");
    }

    #[test]
    fn zero_adapters_give_the_fusion_bias() {
        let ch = [2; 4];
        let mut p = projector(ch, 4, 3);
        for l in &mut p.levels {
            l.cnn_adapter.zero();
            l.vit_adapter.zero();
            l.embedding.set(Matrix::zeros(1, 4));
            l.fuse.bias.set(Matrix::from_rows(&[[0.5, -1.0, 2.0, 0.25]]));
        }
        let (c, v) = synth_pair(32, 32, ch, 3).unwrap();
        for level in project(&c, &v, &p).unwrap() {
            for r in 0..level.rows() {
                assert_eq!(level.row(r), &[0.5, -1.0, 2.0, 0.25]);
            }
        }
    }

    #[test]
    fn swapping_embeddings_touches_only_those_levels() {
        let ch = [2, 3, 4, 5];
        let p = projector(ch, 4, 4);
        let (c, v) = synth_pair(32, 32, ch, 4).unwrap();
        let base = project(&c, &v, &p).unwrap();
        let mut q = p.clone();
        let (e0, e1) = (q.levels[0].embedding.clone(), q.levels[1].embedding.clone());
        q.levels[0].embedding.set(e1.value().clone());
        q.levels[1].embedding.set(e0.value().clone());
        let swapped = project(&c, &v, &q).unwrap();
        assert!(base[0].max_abs_diff(&swapped[0]) > 1e-9);
        assert!(base[1].max_abs_diff(&swapped[1]) > 1e-9);
        assert_eq!(base[2], swapped[2]);
        assert_eq!(base[3], swapped[3]);
    }

    #[test]
    fn levels_are_local() {
        let ch = [2; 4];
        let p = projector(ch, 4, 5);
        let (c, v) = synth_pair(32, 32, ch, 5).unwrap();
        let (c2, _) = synth_pair(32, 32, ch, 6).unwrap();
        let mut levels = c.levels().to_vec();
        levels[2] = c2.levels()[2].clone();
        let mixed = FeaturePyramid::new(32, 32, levels).unwrap();
        let a = project(&c, &v, &p).unwrap();
        let b = project(&mixed, &v, &p).unwrap();
        for i in [0, 1, 3] {
            assert_eq!(a[i], b[i]);
        }
        assert_ne!(a[2], b[2]);
    }

    #[test]
    fn disabled_levels_are_skipped() {
        let ch = [2; 4];
        let p = projector(ch, 4, 6);
        let (c, v) = synth_pair(32, 32, ch, 6).unwrap();
        let out = p.project(&c, &v, [false, false, true, false], 0).unwrap();
        assert!(out[0].is_none() && out[1].is_none() && out[3].is_none());
        assert_eq!(out[2].as_ref().unwrap().latent.shape(), (4, 4));
    }
}
