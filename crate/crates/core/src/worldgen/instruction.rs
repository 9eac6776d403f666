use super::world::{Background, Companion, Shape, Sprite, Style, Texture, WorldSpec, PALETTE};
use crate::error::{invalid, Result};
use crate::numerics::Tensor;
use crate::rng::Stream;
use crate::vocab::{self, Token};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Add,
    Remove,
    Background,
    Texture,
    Local,
    Style,
    Global,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::Add,
        Task::Remove,
        Task::Background,
        Task::Texture,
        Task::Local,
        Task::Style,
        Task::Global,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Add => "add",
            Task::Remove => "remove",
            Task::Background => "background",
            Task::Texture => "texture",
            Task::Local => "local",
            Task::Style => "style",
            Task::Global => "global",
        }
    }

    pub fn token(self) -> Token {
        vocab::token(self.name()).expect("task names are tokens")
    }

    pub fn parse(s: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid("task", format!("unknown task `{s}`")))
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditParams {
    Add { shape: Shape, color: usize },
    Remove,
    Background { color: usize },
    Texture { texture: Texture },
    Local { color: usize },
    Style { style: Style },
    Global { color: usize, background: usize },
}

impl EditParams {
    pub fn task(&self) -> Task {
        match self {
            EditParams::Add { .. } => Task::Add,
            EditParams::Remove => Task::Remove,
            EditParams::Background { .. } => Task::Background,
            EditParams::Texture { .. } => Task::Texture,
            EditParams::Local { .. } => Task::Local,
            EditParams::Style { .. } => Task::Style,
            EditParams::Global { .. } => Task::Global,
        }
    }

    /// Instruction tokens; the task label is always token 0.
    pub fn tokens(&self) -> Vec<Token> {
        let mut names: Vec<String> = vec![self.task().name().into()];
        match *self {
            EditParams::Add { shape, color } => {
                names.push(format!("plus_{}", shape.name()));
                names.push(format!("plus_{}", PALETTE[color].0));
            }
            EditParams::Remove => {}
            EditParams::Background { color } => names.push(format!("bg_{}", PALETTE[color].0)),
            EditParams::Texture { texture } => names.push(texture.token().into()),
            EditParams::Local { color } => names.push(PALETTE[color].0.into()),
            EditParams::Style { style } => names.push(style.token().into()),
            EditParams::Global { color, background } => {
                names.push(PALETTE[color].0.into());
                names.push(format!("bg_{}", PALETTE[background].0));
            }
        }
        names.iter().map(|n| vocab::token(n).expect("instruction tokens are in the vocabulary")).collect()
    }

    /// Parse `"<task> [params..]"`, e.g. `"local blue"`, `"add circle red"`,
    /// `"global yellow cyan"` (sprite then background color).
    pub fn parse(text: &str) -> Result<EditParams> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let task = Task::parse(words.first().copied().unwrap_or(""))?;
        let color = |i: usize| -> Result<usize> {
            let w = words.get(i).ok_or_else(|| invalid("instruction", format!("`{text}` is missing a color")))?;
            PALETTE
                .iter()
                .position(|(n, _)| n == w)
                .ok_or_else(|| invalid("instruction", format!("unknown color `{w}`")))
        };
        let arity = |n: usize| -> Result<()> {
            if words.len() != n + 1 {
                return Err(invalid("instruction", format!("`{}` takes {n} parameter(s)", task.name())));
            }
            Ok(())
        };
        Ok(match task {
            Task::Add => {
                arity(2)?;
                let shape = Shape::ALL
                    .into_iter()
                    .find(|s| s.name() == words[1])
                    .ok_or_else(|| invalid("instruction", format!("unknown shape `{}`", words[1])))?;
                EditParams::Add { shape, color: color(2)? }
            }
            Task::Remove => {
                arity(0)?;
                EditParams::Remove
            }
            Task::Background => {
                arity(1)?;
                EditParams::Background { color: color(1)? }
            }
            Task::Texture => {
                arity(1)?;
                let texture = Texture::ALL
                    .into_iter()
                    .find(|t| t.token() == words[1])
                    .ok_or_else(|| invalid("instruction", format!("unknown texture `{}`", words[1])))?;
                EditParams::Texture { texture }
            }
            Task::Local => {
                arity(1)?;
                EditParams::Local { color: color(1)? }
            }
            Task::Style => {
                arity(1)?;
                let style = Style::ALL
                    .into_iter()
                    .find(|s| s.token() == words[1])
                    .ok_or_else(|| invalid("instruction", format!("unknown style `{}`", words[1])))?;
                EditParams::Style { style }
            }
            Task::Global => {
                arity(2)?;
                EditParams::Global {
                    color: color(1)?,
                    background: color(2)?,
                }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionRecord {
    pub task: Task,
    pub params: EditParams,
    pub c_instruct: Vec<Token>,
    /// Caption of the scene after the edit.
    pub c_out: Vec<Token>,
}

fn other_colors(exclude: &[usize]) -> Vec<usize> {
    (0..PALETTE.len()).filter(|c| !exclude.contains(c)).collect()
}

/// Whether `task` can be applied to `spec`.
pub fn applicable(spec: &WorldSpec, task: Task) -> bool {
    let has_sprite = spec.sprite.is_some();
    match task {
        Task::Add => has_sprite && spec.companion.is_none() && companion_offset(spec).is_some(),
        Task::Remove | Task::Local | Task::Global => has_sprite,
        Task::Texture => has_sprite && spec.texture.is_none(),
        Task::Style => spec.style.is_none(),
        Task::Background => true,
    }
}

/// Horizontal offset placing a second sprite beside the first at frame 0.
fn companion_offset(spec: &WorldSpec) -> Option<(i32, i32)> {
    let s = spec.sprite_size as i32;
    let gap = s + 1;
    let x = spec.position.0;
    if x + gap + s <= spec.width as i32 {
        Some((gap, 0))
    } else if x - gap >= 0 {
        Some((-gap, 0))
    } else {
        None
    }
}

/// Draw uniformly from the valid parameters of `task` for `spec`.
pub fn sample_instruction(spec: &WorldSpec, task: Task, rng: &mut Stream) -> Result<InstructionRecord> {
    if !applicable(spec, task) {
        return Err(invalid("sample_instruction", format!("task {task} does not apply to this scene")));
    }
    let bg = spec.background.color;
    let sprite_color = spec.sprite.map(|s| s.color);
    let companion_color = spec.companion.map(|c| c.color);
    let params = match task {
        Task::Add => EditParams::Add {
            shape: *rng.pick(&Shape::ALL),
            color: *rng.pick(&other_colors(&[bg])),
        },
        Task::Remove => EditParams::Remove,
        Task::Background => {
            let mut excl = vec![bg];
            excl.extend(sprite_color);
            excl.extend(companion_color);
            EditParams::Background {
                color: *rng.pick(&other_colors(&excl)),
            }
        }
        Task::Texture => EditParams::Texture {
            texture: *rng.pick(&Texture::ALL),
        },
        Task::Local => {
            let mut excl = vec![bg];
            excl.extend(sprite_color);
            EditParams::Local {
                color: *rng.pick(&other_colors(&excl)),
            }
        }
        Task::Style => EditParams::Style {
            style: *rng.pick(&Style::ALL),
        },
        Task::Global => {
            let mut excl = vec![];
            excl.extend(sprite_color);
            excl.extend(companion_color);
            let color = *rng.pick(&other_colors(&excl));
            let mut excl_bg = vec![bg, color];
            excl_bg.extend(companion_color);
            EditParams::Global {
                color,
                background: *rng.pick(&other_colors(&excl_bg)),
            }
        }
    };
    record(spec, params)
}

/// Build the record for explicit parameters (checked for applicability).
pub fn record(spec: &WorldSpec, params: EditParams) -> Result<InstructionRecord> {
    let task = params.task();
    if !applicable(spec, task) {
        return Err(invalid("instruction", format!("task {task} does not apply to this scene")));
    }
    let edited = apply(spec, &params)?;
    Ok(InstructionRecord {
        task,
        params,
        c_instruct: params.tokens(),
        c_out: edited.caption(),
    })
}

/// The scene after the edit.
pub fn apply(spec: &WorldSpec, params: &EditParams) -> Result<WorldSpec> {
    let mut out = spec.clone();
    match *params {
        EditParams::Add { shape, color } => {
            let offset = companion_offset(spec).ok_or_else(|| invalid("apply", "no room for a second sprite"))?;
            out.companion = Some(Companion { shape, color, offset });
        }
        EditParams::Remove => {
            out.sprite = None;
            out.texture = None;
        }
        EditParams::Background { color } => {
            out.background = Background {
                color,
                ..spec.background
            }
        }
        EditParams::Texture { texture } => out.texture = Some(texture),
        EditParams::Local { color } => {
            out.sprite = spec.sprite.map(|s| Sprite { color, ..s });
        }
        EditParams::Style { style } => out.style = Some(style),
        EditParams::Global { color, background } => {
            out.sprite = spec.sprite.map(|s| Sprite { color, ..s });
            out.background = Background {
                color: background,
                ..spec.background
            };
        }
    }
    Ok(out)
}

/// Ground-truth edit of `video` (which must be the rendering of `spec`).
/// Motion is preserved exactly because the edited scene shares the trajectory.
pub fn oracle_edit(video: &Tensor, spec: &WorldSpec, instr: &InstructionRecord) -> Result<Tensor> {
    if video.shape().first() != Some(&spec.frames) {
        return Err(invalid(
            "oracle_edit",
            format!("video shape {:?} does not match {} frames", video.shape(), spec.frames),
        ));
    }
    if !applicable(spec, instr.task) {
        return Err(invalid("oracle_edit", format!("task {} does not apply", instr.task)));
    }
    apply(spec, &instr.params)?.render()
}
