//! Anti-aliased raster views of the 2-D scene.

use crate::types::Image;

use super::{EnvKind, EnvState, AGENT_RADIUS, GOAL_RADIUS, OBJECT_RADIUS};

pub const SIDE_SIZE: usize = 32;
pub const WRIST_SIZE: usize = 16;
/// Workspace width covered by the wrist view.
pub const WRIST_SPAN: f64 = 0.3;

const BACKGROUND: [f32; 3] = [0.1, 0.1, 0.1];
const OUTSIDE: [f32; 3] = [0.0, 0.0, 0.0];
const WALL: [f32; 3] = [0.55, 0.55, 0.55];
const GOAL: [f32; 3] = [0.1, 0.8, 0.2];
const OBJECT: [f32; 3] = [0.95, 0.6, 0.1];
const AGENT_OPEN: [f32; 3] = [0.2, 0.4, 1.0];
const AGENT_CLOSED: [f32; 3] = [0.9, 0.2, 0.9];

enum Shape {
    Rect { x0: f64, x1: f64, y0: f64, y1: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    /// Fraction of the square pixel centred at (x, y) with side `px` covered.
    fn coverage(&self, x: f64, y: f64, px: f64) -> f64 {
        match *self {
            Shape::Rect { x0, x1, y0, y1 } => {
                let h = px / 2.0;
                let ox = ((x + h).min(x1) - (x - h).max(x0)).max(0.0);
                let oy = ((y + h).min(y1) - (y - h).max(y0)).max(0.0);
                ox * oy / (px * px)
            }
            Shape::Disk { cx, cy, r } => {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                (0.5 + (r - d) / px).clamp(0.0, 1.0)
            }
        }
    }
}

fn scene(kind: EnvKind, s: &EnvState) -> Vec<(Shape, [f32; 3])> {
    let mut shapes = Vec::new();
    match kind {
        EnvKind::Insert2d => {
            for (x0, x1, y0, y1) in super::wall_rects(s.slot_x) {
                shapes.push((Shape::Rect { x0, x1, y0, y1 }, WALL));
            }
        }
        EnvKind::Reach2d | EnvKind::Pickplace2d => {
            shapes.push((
                Shape::Disk {
                    cx: s.goal[0],
                    cy: s.goal[1],
                    r: GOAL_RADIUS,
                },
                GOAL,
            ));
        }
    }
    if kind == EnvKind::Pickplace2d {
        shapes.push((
            Shape::Disk {
                cx: s.object[0],
                cy: s.object[1],
                r: OBJECT_RADIUS,
            },
            OBJECT,
        ));
    }
    let agent = if s.gripper_closed { AGENT_CLOSED } else { AGENT_OPEN };
    shapes.push((
        Shape::Disk {
            cx: s.pos[0],
            cy: s.pos[1],
            r: AGENT_RADIUS,
        },
        agent,
    ));
    shapes
}

/// Renders the square window `[cx - span/2, cx + span/2]^2` at `size` pixels.
/// Row 0 is the top of the window (largest y).
fn raster(kind: EnvKind, s: &EnvState, cx: f64, cy: f64, span: f64, size: usize) -> Image {
    let shapes = scene(kind, s);
    let px = span / size as f64;
    let (left, top) = (cx - span / 2.0, cy + span / 2.0);
    let mut img = Image::zeros(size, size, 3);
    let outside = Shape::Rect {
        x0: 0.0,
        x1: 1.0,
        y0: 0.0,
        y1: 1.0,
    };
    for row in 0..size {
        let y = top - (row as f64 + 0.5) * px;
        for col in 0..size {
            let x = left + (col as f64 + 0.5) * px;
            let inside = outside.coverage(x, y, px);
            let mut c = [0f64; 3];
            for k in 0..3 {
                c[k] = inside * BACKGROUND[k] as f64 + (1.0 - inside) * OUTSIDE[k] as f64;
            }
            for (shape, color) in &shapes {
                let a = shape.coverage(x, y, px);
                if a > 0.0 {
                    for k in 0..3 {
                        c[k] = (1.0 - a) * c[k] + a * color[k] as f64;
                    }
                }
            }
            let p = img.pixel_mut(row, col);
            for k in 0..3 {
                p[k] = c[k].clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// Fixed full-workspace view.
pub fn side_view(kind: EnvKind, s: &EnvState) -> Image {
    raster(kind, s, 0.5, 0.5, 1.0, SIDE_SIZE)
}

/// Close-up centred on the agent.
pub fn wrist_view(kind: EnvKind, s: &EnvState) -> Image {
    raster(kind, s, s.pos[0], s.pos[1], WRIST_SPAN, WRIST_SIZE)
}
