//! Detached teacher samples used as the discriminators' real examples and
//! as the student's first-frame condition.

use std::path::Path;

use crate::diffusion::{uniform_steps, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::models::compose::{inference_binder, sample_with};
use crate::models::{Conds, Model, Variant};
use crate::numerics::{fdt, Tensor, Var};
use crate::par;
use crate::rng::Stream;
use crate::vocab::Token;
use crate::worldgen::DataPoint;

const CHUNK: usize = 8;

#[derive(Clone, Debug, Default)]
pub struct TeacherPool {
    /// Per-frame edits of each point's input clip, `[F, C, H, W]`.
    pub edit: Vec<Tensor>,
    /// Clips generated from each point's output caption.
    pub video: Vec<Tensor>,
}

impl TeacherPool {
    pub fn len(&self) -> usize {
        self.edit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edit.is_empty()
    }

    /// Sample both teachers for every point with `steps` DDIM steps. Point
    /// `i` draws its noise from `rng.split_index(i)`.
    pub fn build(teacher: &Model, points: &[DataPoint], steps: usize, sched: &NoiseSchedule, rng: &Stream) -> Result<TeacherPool> {
        let ts = uniform_steps(steps, sched.steps())?;
        let chunks: Vec<&[DataPoint]> = points.chunks(CHUNK).collect();
        let out = par::map(chunks.len(), |c| sample_chunk(teacher, chunks[c], c * CHUNK, &ts, sched, rng));
        let mut pool = TeacherPool::default();
        for r in out {
            let (e, v) = r?;
            pool.edit.extend(e);
            pool.video.extend(v);
        }
        Ok(pool)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, (e, v)) in self.edit.iter().zip(&self.video).enumerate() {
            fdt::write(&dir.join(format!("{i:05}_edit.fdt")), e)?;
            fdt::write(&dir.join(format!("{i:05}_video.fdt")), v)?;
        }
        std::fs::write(dir.join("count.txt"), format!("{}\n", self.len()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<TeacherPool> {
        let path = dir.join("count.txt");
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let n: usize = std::fs::read_to_string(&path)?.trim().parse().map_err(|_| Error::Format {
            path: path.clone(),
            msg: "expected an item count".into(),
        })?;
        let mut pool = TeacherPool::default();
        for i in 0..n {
            pool.edit.push(fdt::read(&dir.join(format!("{i:05}_edit.fdt")))?);
            pool.video.push(fdt::read(&dir.join(format!("{i:05}_video.fdt")))?);
        }
        Ok(pool)
    }
}

fn sample_chunk(teacher: &Model, points: &[DataPoint], offset: usize, ts: &[usize], sched: &NoiseSchedule, rng: &Stream) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let cfg = &teacher.cfg;
    let f = points[0].c_vid.shape()[0];
    if points.iter().any(|p| p.c_vid.shape()[0] != f) {
        return Err(invalid("teacher pool", "all clips must have the same length"));
    }
    let streams: Vec<Stream> = (0..points.len()).map(|i| rng.split_index((offset + i) as u64)).collect();
    let noise = |label: &str| -> Result<Var> {
        let parts: Vec<Tensor> = streams
            .iter()
            .zip(points)
            .map(|(s, p)| s.split(label).normal_tensor(p.c_vid.shape()))
            .collect();
        Ok(Var::constant(Tensor::cat0(&parts)?))
    };
    let rows = |per: Vec<Vec<Token>>| -> Vec<Vec<Token>> { per.into_iter().flat_map(|c| std::iter::repeat(c).take(f)).collect() };
    let c_vid = Var::constant(Tensor::cat0(&points.iter().map(|p| p.c_vid.clone()).collect::<Vec<_>>())?);
    let c_out_rows = rows(points.iter().map(|p| p.c_out.clone()).collect());
    let c_ins_rows = rows(points.iter().map(|p| p.c_instruct.clone()).collect());
    let per_frame = Conds {
        frames: 1,
        c_out: &c_out_rows,
        c_instruct: Some(&c_ins_rows),
        c_vid: Some(&c_vid),
        first: None,
    };
    let psi = inference_binder(teacher, Variant::Psi);
    let edit = sample_with(&psi, cfg, Variant::Psi, &per_frame, noise("edit")?, ts, sched)?.value().clone();

    let first = if cfg.first_frame {
        let firsts: Vec<Tensor> = (0..points.len()).map(|i| edit.slice0(i * f, 1)).collect::<Result<_>>()?;
        Some(Var::constant(Tensor::cat0(&firsts)?))
    } else {
        None
    };
    let c_out: Vec<Vec<Token>> = points.iter().map(|p| p.c_out.clone()).collect();
    let clip = Conds {
        frames: f,
        c_out: &c_out,
        c_instruct: None,
        c_vid: None,
        first: first.as_ref(),
    };
    let rho = inference_binder(teacher, Variant::Rho);
    let video = sample_with(&rho, cfg, Variant::Rho, &clip, noise("video")?, ts, sched)?.value().clone();
    let split = |t: &Tensor| -> Result<Vec<Tensor>> { (0..points.len()).map(|i| t.slice0(i * f, f)).collect() };
    Ok((split(&edit)?, split(&video)?))
}
