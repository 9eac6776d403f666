//! Dataset materialization: backbone frames, edit pairs, videos, the
//! unsupervised FDD triplets and the held-out eval set.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use super::instruction::{applicable, apply, oracle_edit, sample_instruction, Task};
use super::world::{Background, BackgroundKind, Shape, Sprite, WorldSpec, PALETTE};
use crate::error::{invalid, Error, Result};
use crate::numerics::{fdt, Tensor};
use crate::par;
use crate::rng::Stream;
use crate::vocab::{self, Token};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetPlan {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub n_backbone: usize,
    pub n_edit: usize,
    pub n_video: usize,
    pub n_fdd: usize,
    pub n_eval: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Default for DatasetPlan {
    fn default() -> Self {
        DatasetPlan {
            height: 16,
            width: 16,
            frames: 4,
            n_backbone: 2048,
            n_edit: 1024,
            n_video: 512,
            n_fdd: 512,
            n_eval: 128,
            train_seed: 1,
            eval_seed: 2,
        }
    }
}

impl DatasetPlan {
    /// `n` items in every subset.
    pub fn uniform(n: usize, seed: u64) -> Self {
        DatasetPlan {
            n_backbone: n,
            n_edit: n,
            n_video: n,
            n_fdd: n,
            n_eval: n,
            train_seed: seed,
            eval_seed: seed.wrapping_add(1),
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.train_seed == self.eval_seed {
            return Err(invalid("build_datasets", "train and eval seeds overlap"));
        }
        let sizes = [self.n_backbone, self.n_edit, self.n_video, self.n_fdd, self.n_eval];
        if sizes.contains(&0) {
            return Err(invalid("build_datasets", "every subset needs at least one item"));
        }
        if self.height < 8 || self.width < 8 || self.frames == 0 {
            return Err(invalid("build_datasets", "grid must be at least 8x8 with one frame"));
        }
        Ok(())
    }
}

/// `(frame, caption)` for backbone pretraining.
#[derive(Clone, Debug)]
pub struct FrameItem {
    pub id: String,
    pub spec_hash: String,
    pub caption: Vec<Token>,
    /// `[1, 3, H, W]`
    pub frame: Tensor,
}

/// Supervised single-frame edit pair.
#[derive(Clone, Debug)]
pub struct EditPair {
    pub id: String,
    pub spec_hash: String,
    pub task: Task,
    pub c_img: Tensor,
    pub c_instruct: Vec<Token>,
    pub c_out: Vec<Token>,
    pub target: Tensor,
}

#[derive(Clone, Debug)]
pub struct VideoItem {
    pub id: String,
    pub spec_hash: String,
    pub caption: Vec<Token>,
    /// `[F, 3, H, W]`
    pub video: Tensor,
}

/// Unsupervised triplet. There is deliberately no target field.
#[derive(Clone, Debug)]
pub struct DataPoint {
    pub id: String,
    pub spec_hash: String,
    pub task: Task,
    pub c_out: Vec<Token>,
    pub c_instruct: Vec<Token>,
    pub c_vid: Tensor,
}

#[derive(Clone, Debug)]
pub struct EvalItem {
    pub point: DataPoint,
    pub target: Tensor,
}

#[derive(Clone, Debug)]
pub struct Datasets {
    pub plan: DatasetPlan,
    pub backbone: Vec<FrameItem>,
    pub edit: Vec<EditPair>,
    pub video: Vec<VideoItem>,
    pub fdd: Vec<DataPoint>,
    pub eval: Vec<EvalItem>,
}

/// A plain scene: one sprite on a background, no decoration.
pub fn sample_spec(rng: &mut Stream, height: usize, width: usize, frames: usize) -> WorldSpec {
    let lo = (height.min(width) / 4).max(3);
    let hi = (height.min(width) * 5 / 16).max(lo);
    let size = rng.range(lo, hi);
    let color = rng.range(0, PALETTE.len() - 1);
    let bg: Vec<usize> = (0..PALETTE.len()).filter(|&c| c != color).collect();
    WorldSpec {
        height,
        width,
        frames,
        sprite_size: size,
        sprite: Some(Sprite {
            shape: *rng.pick(&Shape::ALL),
            color,
        }),
        position: (rng.range_i32(0, (width - size) as i32), rng.range_i32(0, (height - size) as i32)),
        velocity: (rng.range_i32(-1, 1), rng.range_i32(-1, 1)),
        background: Background {
            kind: if rng.bernoulli(0.5) {
                BackgroundKind::Solid
            } else {
                BackgroundKind::Gradient
            },
            color: *rng.pick(&bg),
        },
        texture: None,
        companion: None,
        style: None,
    }
}

fn sample_task(spec: &WorldSpec, rng: &mut Stream) -> Task {
    let ok: Vec<Task> = Task::ALL.into_iter().filter(|&t| applicable(spec, t)).collect();
    *rng.pick(&ok)
}

/// A plain scene with, half of the time, one random edit baked in. Gives the
/// backbone and video teachers coverage of every caption token.
fn decorated_spec(rng: &mut Stream, plan: &DatasetPlan) -> Result<WorldSpec> {
    let base = sample_spec(rng, plan.height, plan.width, plan.frames);
    if rng.bernoulli(0.5) {
        let task = sample_task(&base, rng);
        let r = sample_instruction(&base, task, rng)?;
        apply(&base, &r.params)
    } else {
        Ok(base)
    }
}

fn fresh<T>(rng: &mut Stream, eval: &HashSet<String>, mut draw: impl FnMut(&mut Stream) -> Result<(String, T)>) -> Result<T> {
    for _ in 0..1000 {
        let (hash, v) = draw(rng)?;
        if !eval.contains(&hash) {
            return Ok(v);
        }
    }
    Err(invalid("build_datasets", "could not draw a scene disjoint from the eval set"))
}

fn frame_of(video: &Tensor, f: usize) -> Result<Tensor> {
    video.slice0(f, 1)
}

fn point(id: String, spec: &WorldSpec, rng: &mut Stream) -> Result<(DataPoint, Tensor)> {
    let task = sample_task(spec, rng);
    let r = sample_instruction(spec, task, rng)?;
    let video = spec.render()?;
    let target = oracle_edit(&video, spec, &r)?;
    Ok((
        DataPoint {
            id,
            spec_hash: spec.hash(),
            task,
            c_out: r.c_out,
            c_instruct: r.c_instruct,
            c_vid: video,
        },
        target,
    ))
}

/// Generate every subset. The eval set is drawn first from its own seed and
/// training scenes whose hash collides with it are redrawn.
pub fn build_datasets(plan: &DatasetPlan) -> Result<Datasets> {
    plan.validate()?;
    let eval_root = Stream::new(plan.eval_seed).split("eval");
    let train_root = Stream::new(plan.train_seed).split("train");

    let eval: Vec<EvalItem> = par::map(plan.n_eval, |i| {
        let mut rng = eval_root.split_index(i as u64);
        let spec = sample_spec(&mut rng, plan.height, plan.width, plan.frames);
        let (point, target) = point(format!("eval{i:05}"), &spec, &mut rng)?;
        Ok(EvalItem { point, target })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let held: HashSet<String> = eval.iter().map(|e| e.point.spec_hash.clone()).collect();

    let backbone = par::map(plan.n_backbone, |i| {
        let mut rng = train_root.split("backbone").split_index(i as u64);
        fresh(&mut rng, &held, |rng| {
            let spec = decorated_spec(rng, plan)?;
            let f = rng.range(0, plan.frames - 1);
            let frame = frame_of(&spec.render()?, f)?;
            let hash = spec.hash();
            Ok((
                hash.clone(),
                FrameItem {
                    id: format!("bb{i:05}"),
                    spec_hash: hash,
                    caption: spec.caption(),
                    frame,
                },
            ))
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let edit = par::map(plan.n_edit, |i| {
        let mut rng = train_root.split("edit").split_index(i as u64);
        fresh(&mut rng, &held, |rng| {
            let spec = sample_spec(rng, plan.height, plan.width, plan.frames);
            let task = sample_task(&spec, rng);
            let r = sample_instruction(&spec, task, rng)?;
            let f = rng.range(0, plan.frames - 1);
            let video = spec.render()?;
            let target = frame_of(&oracle_edit(&video, &spec, &r)?, f)?;
            let hash = spec.hash();
            Ok((
                hash.clone(),
                EditPair {
                    id: format!("ed{i:05}"),
                    spec_hash: hash,
                    task,
                    c_img: frame_of(&video, f)?,
                    c_instruct: r.c_instruct,
                    c_out: r.c_out,
                    target,
                },
            ))
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let video = par::map(plan.n_video, |i| {
        let mut rng = train_root.split("video").split_index(i as u64);
        fresh(&mut rng, &held, |rng| {
            let spec = decorated_spec(rng, plan)?;
            let hash = spec.hash();
            Ok((
                hash.clone(),
                VideoItem {
                    id: format!("vid{i:05}"),
                    spec_hash: hash,
                    caption: spec.caption(),
                    video: spec.render()?,
                },
            ))
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let fdd = par::map(plan.n_fdd, |i| {
        let mut rng = train_root.split("fdd").split_index(i as u64);
        fresh(&mut rng, &held, |rng| {
            let spec = sample_spec(rng, plan.height, plan.width, plan.frames);
            // the oracle output is never computed for training triplets
            let task = sample_task(&spec, rng);
            let r = sample_instruction(&spec, task, rng)?;
            let hash = spec.hash();
            Ok((
                hash.clone(),
                DataPoint {
                    id: format!("fdd{i:05}"),
                    spec_hash: hash,
                    task,
                    c_out: r.c_out,
                    c_instruct: r.c_instruct,
                    c_vid: spec.render()?,
                },
            ))
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    Ok(Datasets {
        plan: plan.clone(),
        backbone,
        edit,
        video,
        fdd,
        eval,
    })
}

// ---- serialization ----

pub const SUBSETS: [&str; 5] = ["backbone", "edit", "video", "fdd", "eval"];
const HEADER: &str = "id\tspec\ttask\tcaption\tc_instruct\tc_out\tfiles";

/// One manifest line.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Row {
    pub id: String,
    pub spec: String,
    pub task: Option<Task>,
    pub caption: Vec<Token>,
    pub c_instruct: Vec<Token>,
    pub c_out: Vec<Token>,
    /// `(role, file name)`
    pub files: Vec<(String, String)>,
}

fn toks(t: &[Token]) -> String {
    if t.is_empty() {
        "-".into()
    } else {
        vocab::render(t)
    }
}

fn parse_toks(s: &str) -> Result<Vec<Token>> {
    if s == "-" {
        Ok(vec![])
    } else {
        vocab::parse(s)
    }
}

impl Row {
    fn line(&self) -> String {
        let files: Vec<String> = self.files.iter().map(|(k, f)| format!("{k}={f}")).collect();
        [
            self.id.clone(),
            self.spec.clone(),
            self.task.map(|t| t.name().to_string()).unwrap_or_else(|| "-".into()),
            toks(&self.caption),
            toks(&self.c_instruct),
            toks(&self.c_out),
            files.join(","),
        ]
        .join("\t")
    }

    fn parse(line: &str, path: &Path) -> Result<Row> {
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(bad(format!("expected 7 columns, got {}", cols.len())));
        }
        let files = cols[6]
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, f)| (k.to_string(), f.to_string()))
                    .ok_or_else(|| bad(format!("bad file entry `{kv}`")))
            })
            .collect::<Result<_>>()?;
        Ok(Row {
            id: cols[0].into(),
            spec: cols[1].into(),
            task: if cols[2] == "-" { None } else { Some(Task::parse(cols[2])?) },
            caption: parse_toks(cols[3])?,
            c_instruct: parse_toks(cols[4])?,
            c_out: parse_toks(cols[5])?,
            files,
        })
    }

    pub fn file(&self, role: &str) -> Option<&str> {
        self.files.iter().find(|(k, _)| k == role).map(|(_, f)| f.as_str())
    }
}

pub fn read_manifest(dir: &Path) -> Result<Vec<Row>> {
    let path = dir.join("manifest.tsv");
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.clone()),
        _ => Error::Io(e),
    })?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Format {
            path,
            msg: "missing manifest header".into(),
        });
    }
    lines.map(|l| Row::parse(l, &path)).collect()
}

fn write_subset(dir: &Path, rows: Vec<(Row, Vec<(&str, &Tensor)>)>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = String::from(HEADER);
    text.push('\n');
    for (mut row, tensors) in rows {
        for (role, t) in tensors {
            let name = format!("{}_{role}.fdt", row.id);
            fdt::write(&dir.join(&name), t)?;
            row.files.push((role.to_string(), name));
        }
        text.push_str(&row.line());
        text.push('\n');
    }
    fs::write(dir.join("manifest.tsv"), text)?;
    Ok(())
}

fn load_tensor(dir: &Path, row: &Row, role: &str) -> Result<Tensor> {
    let f = row.file(role).ok_or_else(|| Error::Format {
        path: dir.join("manifest.tsv"),
        msg: format!("item {} has no `{role}` tensor", row.id),
    })?;
    fdt::read(&dir.join(f))
}

fn need_task(dir: &Path, row: &Row) -> Result<Task> {
    row.task.ok_or_else(|| Error::Format {
        path: dir.join("manifest.tsv"),
        msg: format!("item {} has no task", row.id),
    })
}

impl Datasets {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let p = &self.plan;
        fs::write(
            dir.join("plan.txt"),
            format!(
                "height = {}\nwidth = {}\nframes = {}\nn_backbone = {}\nn_edit = {}\nn_video = {}\nn_fdd = {}\nn_eval = {}\ntrain_seed = {}\neval_seed = {}\n",
                p.height, p.width, p.frames, p.n_backbone, p.n_edit, p.n_video, p.n_fdd, p.n_eval, p.train_seed, p.eval_seed
            ),
        )?;
        write_subset(
            &dir.join("backbone"),
            self.backbone
                .iter()
                .map(|it| {
                    let row = Row {
                        id: it.id.clone(),
                        spec: it.spec_hash.clone(),
                        caption: it.caption.clone(),
                        ..Default::default()
                    };
                    (row, vec![("frame", &it.frame)])
                })
                .collect(),
        )?;
        write_subset(
            &dir.join("edit"),
            self.edit
                .iter()
                .map(|it| {
                    let row = Row {
                        id: it.id.clone(),
                        spec: it.spec_hash.clone(),
                        task: Some(it.task),
                        c_instruct: it.c_instruct.clone(),
                        c_out: it.c_out.clone(),
                        ..Default::default()
                    };
                    (row, vec![("input", &it.c_img), ("target", &it.target)])
                })
                .collect(),
        )?;
        write_subset(
            &dir.join("video"),
            self.video
                .iter()
                .map(|it| {
                    let row = Row {
                        id: it.id.clone(),
                        spec: it.spec_hash.clone(),
                        caption: it.caption.clone(),
                        ..Default::default()
                    };
                    (row, vec![("video", &it.video)])
                })
                .collect(),
        )?;
        let point_row = |p: &DataPoint| Row {
            id: p.id.clone(),
            spec: p.spec_hash.clone(),
            task: Some(p.task),
            c_instruct: p.c_instruct.clone(),
            c_out: p.c_out.clone(),
            ..Default::default()
        };
        write_subset(
            &dir.join("fdd"),
            self.fdd.iter().map(|p| (point_row(p), vec![("input", &p.c_vid)])).collect(),
        )?;
        write_subset(
            &dir.join("eval"),
            self.eval
                .iter()
                .map(|e| (point_row(&e.point), vec![("input", &e.point.c_vid), ("target", &e.target)]))
                .collect(),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Datasets> {
        let plan = load_plan(dir)?;
        let sub = |name: &str| dir.join(name);
        let backbone = {
            let d = sub("backbone");
            read_manifest(&d)?
                .into_iter()
                .map(|r| {
                    Ok(FrameItem {
                        frame: load_tensor(&d, &r, "frame")?,
                        id: r.id,
                        spec_hash: r.spec,
                        caption: r.caption,
                    })
                })
                .collect::<Result<_>>()?
        };
        let edit = {
            let d = sub("edit");
            read_manifest(&d)?
                .into_iter()
                .map(|r| {
                    Ok(EditPair {
                        task: need_task(&d, &r)?,
                        c_img: load_tensor(&d, &r, "input")?,
                        target: load_tensor(&d, &r, "target")?,
                        id: r.id,
                        spec_hash: r.spec,
                        c_instruct: r.c_instruct,
                        c_out: r.c_out,
                    })
                })
                .collect::<Result<_>>()?
        };
        let video = {
            let d = sub("video");
            read_manifest(&d)?
                .into_iter()
                .map(|r| {
                    Ok(VideoItem {
                        video: load_tensor(&d, &r, "video")?,
                        id: r.id,
                        spec_hash: r.spec,
                        caption: r.caption,
                    })
                })
                .collect::<Result<_>>()?
        };
        let fdd = load_points(&sub("fdd"))?;
        let eval = {
            let d = sub("eval");
            read_manifest(&d)?
                .iter()
                .map(|r| {
                    Ok(EvalItem {
                        point: row_point(&d, r)?,
                        target: load_tensor(&d, r, "target")?,
                    })
                })
                .collect::<Result<_>>()?
        };
        Ok(Datasets {
            plan,
            backbone,
            edit,
            video,
            fdd,
            eval,
        })
    }
}

fn row_point(dir: &Path, r: &Row) -> Result<DataPoint> {
    Ok(DataPoint {
        id: r.id.clone(),
        spec_hash: r.spec.clone(),
        task: need_task(dir, r)?,
        c_out: r.c_out.clone(),
        c_instruct: r.c_instruct.clone(),
        c_vid: load_tensor(dir, r, "input")?,
    })
}

/// Load the unsupervised FDD triplets. A manifest that lists any target
/// tensor is rejected outright.
pub fn load_points(dir: &Path) -> Result<Vec<DataPoint>> {
    let rows = read_manifest(dir)?;
    if let Some(r) = rows.iter().find(|r| r.files.iter().any(|(k, _)| k != "input")) {
        return Err(Error::Format {
            path: dir.join("manifest.tsv"),
            msg: format!("item {} carries a non-input tensor; FDD data must be unsupervised", r.id),
        });
    }
    rows.iter().map(|r| row_point(dir, r)).collect()
}

fn load_plan(dir: &Path) -> Result<DatasetPlan> {
    let path = dir.join("plan.txt");
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.clone()),
        _ => Error::Io(e),
    })?;
    let mut plan = DatasetPlan::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            path: path.clone(),
            msg: format!("bad line `{line}`"),
        })?;
        let v = v.trim();
        let num = || -> Result<u64> {
            v.parse().map_err(|_| Error::Format {
                path: path.clone(),
                msg: format!("bad number `{v}`"),
            })
        };
        match k.trim() {
            "height" => plan.height = num()? as usize,
            "width" => plan.width = num()? as usize,
            "frames" => plan.frames = num()? as usize,
            "n_backbone" => plan.n_backbone = num()? as usize,
            "n_edit" => plan.n_edit = num()? as usize,
            "n_video" => plan.n_video = num()? as usize,
            "n_fdd" => plan.n_fdd = num()? as usize,
            "n_eval" => plan.n_eval = num()? as usize,
            "train_seed" => plan.train_seed = num()?,
            "eval_seed" => plan.eval_seed = num()?,
            other => {
                return Err(Error::Format {
                    path: path.clone(),
                    msg: format!("unknown key `{other}`"),
                })
            }
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetPlan {
        DatasetPlan::uniform(10, 3)
    }

    #[test]
    fn equal_seeds_rejected() {
        let mut p = small();
        p.eval_seed = p.train_seed;
        assert!(build_datasets(&p).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let d = build_datasets(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = Datasets::load(dir.path()).unwrap();
        assert_eq!(back.plan, d.plan);
        for (a, b) in d.edit.iter().zip(&back.edit) {
            assert!(a.c_img.bit_eq(&b.c_img) && a.target.bit_eq(&b.target));
            assert_eq!((a.task, &a.c_out), (b.task, &b.c_out));
        }
        for (a, b) in d.eval.iter().zip(&back.eval) {
            assert!(a.target.bit_eq(&b.target) && a.point.c_vid.bit_eq(&b.point.c_vid));
        }
        assert_eq!(back.backbone.len(), 10);
        assert!(back.video[3].video.bit_eq(&d.video[3].video));
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let a = build_datasets(&small()).unwrap();
        let b = build_datasets(&small()).unwrap();
        for (x, y) in a.fdd.iter().zip(&b.fdd) {
            assert!(x.c_vid.bit_eq(&y.c_vid));
            assert_eq!(x.c_instruct, y.c_instruct);
        }
    }

    #[test]
    fn fdd_manifest_has_no_targets() {
        let d = build_datasets(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let rows = read_manifest(&dir.path().join("fdd")).unwrap();
        assert!(rows.iter().all(|r| r.files.len() == 1 && r.file("input").is_some()));
        assert!(load_points(&dir.path().join("fdd")).is_ok());
        // the eval manifest does carry targets and is refused as FDD input
        assert!(load_points(&dir.path().join("eval")).is_err());
    }

    #[test]
    fn eval_and_train_hashes_disjoint() {
        let d = build_datasets(&DatasetPlan::uniform(60, 9)).unwrap();
        let held: HashSet<_> = d.eval.iter().map(|e| e.point.spec_hash.clone()).collect();
        let train = d
            .backbone
            .iter()
            .map(|i| &i.spec_hash)
            .chain(d.edit.iter().map(|i| &i.spec_hash))
            .chain(d.video.iter().map(|i| &i.spec_hash))
            .chain(d.fdd.iter().map(|i| &i.spec_hash));
        for h in train {
            assert!(!held.contains(h));
        }
    }

    #[test]
    fn task_frequencies_within_three_sigma() {
        let mut rng = Stream::new(77);
        let n = 1000;
        let mut counts = [0usize; 7];
        for _ in 0..n {
            let spec = sample_spec(&mut rng, 16, 16, 4);
            let t = sample_task(&spec, &mut rng);
            counts[Task::ALL.iter().position(|&x| x == t).unwrap()] += 1;
        }
        let p = 1.0 / 7.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn sampled_specs_are_valid() {
        let mut rng = Stream::new(4);
        for _ in 0..500 {
            let s = sample_spec(&mut rng, 16, 16, 4);
            s.validate().unwrap();
            assert!(Task::ALL.iter().all(|&t| applicable(&s, t)));
        }
    }
}
