use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::numerics::Tensor;
use crate::vocab::{self, Token};

pub const PALETTE: [(&str, [f32; 3]); 6] = [
    ("red", [0.90, 0.15, 0.15]),
    ("green", [0.15, 0.75, 0.20]),
    ("blue", [0.20, 0.30, 0.90]),
    ("yellow", [0.95, 0.85, 0.20]),
    ("magenta", [0.85, 0.20, 0.80]),
    ("cyan", [0.20, 0.80, 0.85]),
];

const TEXTURE_INK: [f32; 3] = [1.0, 1.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether cell `(dx, dy)` of a `size` x `size` box is covered.
    pub fn covers(self, size: usize, dx: usize, dy: usize) -> bool {
        let s = size as f32;
        match self {
            Shape::Square => true,
            Shape::Circle => {
                let c = (s - 1.0) / 2.0;
                let (x, y) = (dx as f32 - c, dy as f32 - c);
                x * x + y * y <= (s / 2.0) * (s / 2.0) + 0.25
            }
            Shape::Triangle => {
                // apex at the top row, full width at the bottom row
                let c = (s - 1.0) / 2.0;
                (dx as f32 - c).abs() <= dy as f32 * c / (s - 1.0).max(1.0) + 0.01
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackgroundKind {
    Solid,
    Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Background {
    pub kind: BackgroundKind,
    pub color: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Texture {
    Stripes,
    Checker,
}

impl Texture {
    pub const ALL: [Texture; 2] = [Texture::Stripes, Texture::Checker];

    pub fn token(self) -> &'static str {
        match self {
            Texture::Stripes => "striped",
            Texture::Checker => "checkered",
        }
    }

    fn ink(self, dx: usize, dy: usize) -> bool {
        match self {
            Texture::Stripes => dy % 2 == 0,
            Texture::Checker => (dx + dy) % 2 == 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Style {
    Sepia,
    Cool,
}

impl Style {
    pub const ALL: [Style; 2] = [Style::Sepia, Style::Cool];

    pub fn token(self) -> &'static str {
        match self {
            Style::Sepia => "sepia",
            Style::Cool => "cool",
        }
    }

    /// Color matrix acting on RGB in [0, 1]; results are clamped.
    pub fn matrix(self) -> [[f32; 3]; 3] {
        match self {
            Style::Sepia => [[0.393, 0.769, 0.189], [0.349, 0.686, 0.168], [0.272, 0.534, 0.131]],
            Style::Cool => [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Sprite {
    pub shape: Shape,
    pub color: usize,
}

/// A second sprite locked to the first one's trajectory at a fixed offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Companion {
    pub shape: Shape,
    pub color: usize,
    pub offset: (i32, i32),
}

/// Everything needed to render one clip. Rendering is a pure function of it.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WorldSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub sprite_size: usize,
    pub sprite: Option<Sprite>,
    /// Top-left corner at frame 0.
    pub position: (i32, i32),
    pub velocity: (i32, i32),
    pub background: Background,
    pub texture: Option<Texture>,
    pub companion: Option<Companion>,
    pub style: Option<Style>,
}

fn to_signed(c: [f32; 3]) -> [f32; 3] {
    c.map(|v| v * 2.0 - 1.0)
}

pub fn motion_token(v: (i32, i32)) -> &'static str {
    match v {
        (0, 0) => "still",
        (-1, 0) => "left",
        (1, 0) => "right",
        (0, -1) => "up",
        (0, 1) => "down",
        (-1, -1) => "up_left",
        (1, -1) => "up_right",
        (-1, 1) => "down_left",
        (1, 1) => "down_right",
        _ => panic!("velocity components must be in -1..=1"),
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.sprite_size as i32;
        if self.sprite_size == 0 || self.sprite_size > self.height || self.sprite_size > self.width {
            return Err(invalid(
                "render_video",
                format!("sprite size {} does not fit a {}x{} grid", self.sprite_size, self.height, self.width),
            ));
        }
        let (x, y) = self.position;
        if x < 0 || y < 0 || x + s > self.width as i32 || y + s > self.height as i32 {
            return Err(invalid("render_video", format!("sprite at {:?} is not inside the grid", self.position)));
        }
        if self.velocity.0.abs() > 1 || self.velocity.1.abs() > 1 {
            return Err(invalid("render_video", format!("velocity {:?} outside -1..=1", self.velocity)));
        }
        if self.frames == 0 {
            return Err(invalid("render_video", "zero frames"));
        }
        let colors = [self.background.color]
            .into_iter()
            .chain(self.sprite.map(|s| s.color))
            .chain(self.companion.map(|c| c.color));
        if colors.into_iter().any(|c| c >= PALETTE.len()) {
            return Err(invalid("render_video", "color outside the palette"));
        }
        Ok(())
    }

    /// Top-left corner of the primary sprite at every frame, bouncing off the walls.
    pub fn trajectory(&self) -> Vec<(i32, i32)> {
        let max_x = (self.width - self.sprite_size) as i32;
        let max_y = (self.height - self.sprite_size) as i32;
        let step = |p: i32, v: &mut i32, max: i32| {
            let mut n = p + *v;
            if n < 0 {
                n = -n;
                *v = -*v;
            } else if n > max {
                n = 2 * max - n;
                *v = -*v;
            }
            n.clamp(0, max)
        };
        let (mut p, mut v) = (self.position, self.velocity);
        let mut out = Vec::with_capacity(self.frames);
        for _ in 0..self.frames {
            out.push(p);
            p = (step(p.0, &mut v.0, max_x), step(p.1, &mut v.1, max_y));
        }
        out
    }

    fn background_rgb(&self, y: usize) -> [f32; 3] {
        let base = PALETTE[self.background.color].1;
        match self.background.kind {
            BackgroundKind::Solid => base,
            BackgroundKind::Gradient => {
                let k = 1.0 - 0.6 * y as f32 / (self.height.max(2) - 1) as f32;
                base.map(|c| c * k)
            }
        }
    }

    /// Pixel mask of the primary sprite per frame, `[frames][h * w]`.
    pub fn sprite_masks(&self) -> Vec<Vec<bool>> {
        let traj = self.trajectory();
        traj.iter()
            .map(|&(x0, y0)| {
                let mut m = vec![false; self.height * self.width];
                if let Some(sp) = self.sprite {
                    self.stamp(sp.shape, x0, y0, |i, _, _| m[i] = true);
                }
                m
            })
            .collect()
    }

    fn stamp(&self, shape: Shape, x0: i32, y0: i32, mut f: impl FnMut(usize, usize, usize)) {
        let s = self.sprite_size;
        for dy in 0..s {
            for dx in 0..s {
                let (x, y) = (x0 + dx as i32, y0 + dy as i32);
                if x < 0 || y < 0 || x >= self.width as i32 || y >= self.height as i32 {
                    continue;
                }
                if shape.covers(s, dx, dy) {
                    f(y as usize * self.width + x as usize, dx, dy);
                }
            }
        }
    }

    /// Render `[frames, 3, h, w]` with values in [-1, 1].
    pub fn render(&self) -> Result<Tensor> {
        self.validate()?;
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let mut data = vec![0.0f32; self.frames * 3 * plane];
        for (f, &(x0, y0)) in self.trajectory().iter().enumerate() {
            let mut rgb = vec![[0.0f32; 3]; plane];
            for y in 0..h {
                let c = self.background_rgb(y);
                rgb[y * w..(y + 1) * w].fill(c);
            }
            if let Some(c) = self.companion {
                let col = PALETTE[c.color].1;
                self.stamp(c.shape, x0 + c.offset.0, y0 + c.offset.1, |i, _, _| rgb[i] = col);
            }
            if let Some(sp) = self.sprite {
                let col = PALETTE[sp.color].1;
                let texture = self.texture;
                self.stamp(sp.shape, x0, y0, |i, dx, dy| {
                    rgb[i] = match texture {
                        None => col,
                        Some(t) if t.ink(dx, dy) => TEXTURE_INK,
                        Some(_) => col.map(|v| v * 0.5),
                    };
                });
            }
            if let Some(style) = self.style {
                let m = style.matrix();
                for px in &mut rgb {
                    let p = *px;
                    *px = [0, 1, 2].map(|r| (m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2]).clamp(0.0, 1.0));
                }
            }
            for (i, px) in rgb.iter().enumerate() {
                let s = to_signed(*px);
                for ch in 0..3 {
                    data[(f * 3 + ch) * plane + i] = s[ch];
                }
            }
        }
        Tensor::from_vec(&[self.frames, 3, h, w], data)
    }

    /// Caption tokens describing the rendered scene.
    pub fn caption(&self) -> Vec<Token> {
        let mut names: Vec<String> = Vec::new();
        match self.sprite {
            Some(sp) => {
                names.push(sp.shape.name().into());
                names.push(PALETTE[sp.color].0.into());
                if let Some(t) = self.texture {
                    names.push(t.token().into());
                }
            }
            None => names.push("empty".into()),
        }
        if let Some(c) = self.companion {
            names.push(format!("plus_{}", c.shape.name()));
            names.push(format!("plus_{}", PALETTE[c.color].0));
        }
        names.push(
            match self.background.kind {
                BackgroundKind::Solid => "solid",
                BackgroundKind::Gradient => "gradient",
            }
            .into(),
        );
        names.push(format!("bg_{}", PALETTE[self.background.color].0));
        if self.sprite.is_some() || self.companion.is_some() {
            names.push(motion_token(self.velocity).into());
        }
        if let Some(s) = self.style {
            names.push(s.token().into());
        }
        names
            .iter()
            .map(|n| vocab::token(n).expect("world tokens are in the vocabulary"))
            .collect()
    }

    /// Stable content hash.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{self:?}").as_bytes());
        crate::numerics::hex(&h.finalize()[..8])
    }

    /// Same world, first `frames` frames only.
    pub fn cropped(&self, frames: usize) -> WorldSpec {
        WorldSpec {
            frames,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(velocity: (i32, i32), position: (i32, i32)) -> WorldSpec {
        WorldSpec {
            height: 16,
            width: 16,
            frames: 4,
            sprite_size: 5,
            sprite: Some(Sprite {
                shape: Shape::Square,
                color: 0,
            }),
            position,
            velocity,
            background: Background {
                kind: BackgroundKind::Solid,
                color: 2,
            },
            texture: None,
            companion: None,
            style: None,
        }
    }

    fn frame(v: &Tensor, f: usize) -> Vec<f32> {
        v.slice0(f, 1).unwrap().to_vec()
    }

    #[test]
    fn still_sprite_gives_identical_frames() {
        let v = spec((0, 0), (3, 4)).render().unwrap();
        for f in 1..4 {
            assert_eq!(frame(&v, f), frame(&v, 0));
        }
    }

    #[test]
    fn rightward_motion_is_a_pixel_shift() {
        let v = spec((1, 0), (2, 5)).render().unwrap();
        let bg = to_signed(PALETTE[2].1);
        for f in 1..4 {
            let (a, b) = (frame(&v, 0), frame(&v, f));
            for ch in 0..3 {
                for y in 0..16 {
                    for x in 0..16 {
                        let want = if x >= f { a[(ch * 16 + y) * 16 + x - f] } else { bg[ch] };
                        assert_eq!(b[(ch * 16 + y) * 16 + x], want);
                    }
                }
            }
        }
    }

    #[test]
    fn bounce_reverses_direction() {
        // max_x = 11; start one pixel from the wall moving right
        let s = spec((1, 0), (10, 3));
        let xs: Vec<i32> = s.trajectory().iter().map(|p| p.0).collect();
        assert_eq!(xs, vec![10, 11, 10, 9]);
    }

    #[test]
    fn oversized_sprite_rejected() {
        let mut s = spec((0, 0), (0, 0));
        s.sprite_size = 17;
        assert!(s.render().is_err());
        let s = spec((0, 0), (12, 0));
        assert!(s.render().is_err());
    }

    #[test]
    fn values_in_signed_unit_range() {
        let mut s = spec((1, 1), (1, 1));
        s.style = Some(Style::Sepia);
        s.texture = Some(Texture::Checker);
        s.background.kind = BackgroundKind::Gradient;
        let v = s.render().unwrap();
        assert!(v.data().iter().all(|&x| (-1.0..=1.0).contains(&x)));
    }

    #[test]
    fn shapes_cover_distinct_masks() {
        let count = |sh: Shape| (0..5).flat_map(|y| (0..5).map(move |x| (x, y))).filter(|&(x, y)| sh.covers(5, x, y)).count();
        let (sq, ci, tr) = (count(Shape::Square), count(Shape::Circle), count(Shape::Triangle));
        assert_eq!(sq, 25);
        assert!(ci < sq && tr < sq && ci != tr, "{sq} {ci} {tr}");
    }

    #[test]
    fn caption_names_the_scene() {
        let s = spec((1, 0), (2, 2));
        assert_eq!(vocab::render(&s.caption()), "square red solid bg_blue right");
    }
}
