//! Newline-delimited JSON trajectory records.
//!
//! A file is a sequence of trajectories. Each starts with a header line
//!
//! ```text
//! {"format":"conrft-traj","version":1,"env":"reach2d","seed":7,"success":true,"len":2}
//! ```
//!
//! followed by `len` transition lines with keys `s`, `a`, `r`, `s_next`,
//! `done`, `intervened`, `mc_return`. Images are base64 of little-endian
//! float32 in row-major HWC order with an explicit `shape`. Labeled example
//! sets add `"label":"positive"` or `"label":"negative"` to the header.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::types::{ActionVector, Image, Observation, Trajectory, Transition};

pub const FORMAT_TAG: &str = "conrft-traj";
pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectoryHeader {
    pub env: String,
    pub seed: u64,
    pub success: bool,
    pub len: usize,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub header: TrajectoryHeader,
    pub trajectory: Trajectory,
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    format: &'static str,
    version: u64,
    env: &'a str,
    seed: u64,
    success: bool,
    len: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<Label>,
}

#[derive(Serialize)]
struct ImageOut {
    shape: [usize; 3],
    data: String,
}

#[derive(Serialize)]
struct ObsOut<'a> {
    images: Vec<ImageOut>,
    proprio: &'a [f64],
}

#[derive(Serialize)]
struct TransitionOut<'a> {
    s: ObsOut<'a>,
    a: &'a [f64],
    r: f64,
    s_next: ObsOut<'a>,
    done: bool,
    intervened: bool,
    mc_return: Option<f64>,
}

pub fn encode_image(img: &Image) -> String {
    let mut bytes = Vec::with_capacity(img.data.len() * 4);
    for v in &img.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn obs_out(o: &Observation) -> ObsOut<'_> {
    ObsOut {
        images: o
            .images
            .iter()
            .map(|img| ImageOut {
                shape: img.shape(),
                data: encode_image(img),
            })
            .collect(),
        proprio: &o.proprio,
    }
}

pub fn write_trajectory<W: Write>(
    w: &mut W,
    env: &str,
    traj: &Trajectory,
    label: Option<Label>,
) -> Result<()> {
    let header = HeaderOut {
        format: FORMAT_TAG,
        version: FORMAT_VERSION,
        env,
        seed: traj.seed,
        success: traj.success,
        len: traj.len(),
        label,
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for t in &traj.transitions {
        let line = TransitionOut {
            s: obs_out(&t.s),
            a: t.a.as_slice(),
            r: t.r,
            s_next: obs_out(&t.s_next),
            done: t.done,
            intervened: t.intervened,
            mc_return: t.mc_return,
        };
        serde_json::to_writer(&mut *w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_trajectories_file<'a, I>(path: &Path, env: &str, trajs: I, label: Option<Label>) -> Result<()>
where
    I: IntoIterator<Item = &'a Trajectory>,
{
    let mut w = BufWriter::new(File::create(path)?);
    for t in trajs {
        write_trajectory(&mut w, env, t, label)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_jsonl_string(env: &str, traj: &Trajectory, label: Option<Label>) -> String {
    let mut buf = Vec::new();
    write_trajectory(&mut buf, env, traj, label).expect("writing to memory");
    String::from_utf8(buf).expect("json is utf-8")
}

struct LineCtx {
    line: usize,
}

impl LineCtx {
    fn err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn get<'v>(&self, obj: &'v Map<String, Value>, field: &str) -> Result<&'v Value> {
        obj.get(field)
            .ok_or_else(|| self.err(field, "missing field"))
    }

    fn f64(&self, v: &Value, field: &str) -> Result<f64> {
        v.as_f64()
            .ok_or_else(|| self.err(field, format!("expected number, found {v}")))
    }

    fn bool(&self, obj: &Map<String, Value>, field: &str) -> Result<bool> {
        self.get(obj, field)?
            .as_bool()
            .ok_or_else(|| self.err(field, "expected boolean"))
    }

    fn u64(&self, obj: &Map<String, Value>, field: &str) -> Result<u64> {
        self.get(obj, field)?
            .as_u64()
            .ok_or_else(|| self.err(field, "expected non-negative integer"))
    }

    fn f64_array(&self, v: &Value, field: &str) -> Result<Vec<f64>> {
        v.as_array()
            .ok_or_else(|| self.err(field, "expected array"))?
            .iter()
            .map(|x| self.f64(x, field))
            .collect()
    }

    fn observation(&self, v: &Value, field: &str) -> Result<Observation> {
        let obj = v
            .as_object()
            .ok_or_else(|| self.err(field, "expected object"))?;
        let images_field = format!("{field}.images");
        let images = self
            .get(obj, "images")
            .map_err(|_| self.err(&images_field, "missing field"))?
            .as_array()
            .ok_or_else(|| self.err(&images_field, "expected array"))?
            .iter()
            .enumerate()
            .map(|(i, img)| self.image(img, &format!("{images_field}[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        let proprio_field = format!("{field}.proprio");
        let proprio = self.f64_array(
            obj.get("proprio")
                .ok_or_else(|| self.err(&proprio_field, "missing field"))?,
            &proprio_field,
        )?;
        Ok(Observation { images, proprio })
    }

    fn image(&self, v: &Value, field: &str) -> Result<Image> {
        let obj = v
            .as_object()
            .ok_or_else(|| self.err(field, "expected object"))?;
        let shape_field = format!("{field}.shape");
        let shape: Vec<usize> = obj
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| self.err(&shape_field, "expected array of three integers"))?
            .iter()
            .map(|x| x.as_u64().map(|u| u as usize))
            .collect::<Option<_>>()
            .filter(|s: &Vec<usize>| s.len() == 3)
            .ok_or_else(|| self.err(&shape_field, "expected array of three integers"))?;
        let data_field = format!("{field}.data");
        let b64 = obj
            .get("data")
            .and_then(Value::as_str)
            .ok_or_else(|| self.err(&data_field, "expected base64 string"))?;
        let bytes = B64
            .decode(b64)
            .map_err(|e| self.err(&data_field, format!("invalid base64: {e}")))?;
        let n = shape[0] * shape[1] * shape[2];
        if bytes.len() != n * 4 {
            return Err(self.err(
                &data_field,
                format!("{} bytes do not match shape {:?}", bytes.len(), shape),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Image {
            height: shape[0],
            width: shape[1],
            channels: shape[2],
            data,
        })
    }
}

fn parse_header(ctx: &LineCtx, v: &Value) -> Result<TrajectoryHeader> {
    let obj = v
        .as_object()
        .ok_or_else(|| ctx.err("format", "expected header object"))?;
    match obj.get("format").and_then(Value::as_str) {
        Some(FORMAT_TAG) => {}
        _ => return Err(ctx.err("format", format!("expected \"{FORMAT_TAG}\""))),
    }
    let version = ctx.u64(obj, "version")?;
    if version != FORMAT_VERSION {
        return Err(ctx.err("version", format!("unsupported version {version}")));
    }
    let env = ctx
        .get(obj, "env")?
        .as_str()
        .ok_or_else(|| ctx.err("env", "expected string"))?
        .to_string();
    let label = match obj.get("label") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) if s == "positive" => Some(Label::Positive),
        Some(Value::String(s)) if s == "negative" => Some(Label::Negative),
        Some(other) => {
            return Err(ctx.err("label", format!("expected \"positive\" or \"negative\", found {other}")))
        }
    };
    Ok(TrajectoryHeader {
        env,
        seed: ctx.u64(obj, "seed")?,
        success: ctx.bool(obj, "success")?,
        len: ctx.u64(obj, "len")? as usize,
        label,
    })
}

fn parse_transition(
    ctx: &LineCtx,
    v: &Value,
    prev_next: Option<&Arc<Observation>>,
) -> Result<Transition> {
    let obj = v
        .as_object()
        .ok_or_else(|| ctx.err("s", "expected transition object"))?;
    let s = ctx.observation(ctx.get(obj, "s")?, "s")?;
    // consecutive transitions share the boundary observation
    let s = match prev_next {
        Some(p) if **p == s => Arc::clone(p),
        _ => Arc::new(s),
    };
    let a = ActionVector(ctx.f64_array(ctx.get(obj, "a")?, "a")?);
    let r = ctx.f64(ctx.get(obj, "r")?, "r")?;
    let s_next = Arc::new(ctx.observation(ctx.get(obj, "s_next")?, "s_next")?);
    let mc_return = match ctx.get(obj, "mc_return")? {
        Value::Null => None,
        other => Some(ctx.f64(other, "mc_return")?),
    };
    Ok(Transition {
        s,
        a,
        r,
        s_next,
        done: ctx.bool(obj, "done")?,
        intervened: ctx.bool(obj, "intervened")?,
        mc_return,
    })
}

pub fn read_trajectories<R: BufRead>(reader: R) -> Result<Vec<TrajectoryRecord>> {
    let mut out: Vec<TrajectoryRecord> = Vec::new();
    let mut remaining = 0usize;
    let mut last_line = 0;
    for (i, line) in reader.lines().enumerate() {
        let ctx = LineCtx { line: i + 1 };
        last_line = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)
            .map_err(|e| ctx.err("<line>", format!("malformed JSON: {e}")))?;
        if remaining == 0 {
            let header = parse_header(&ctx, &v)?;
            remaining = header.len;
            out.push(TrajectoryRecord {
                trajectory: Trajectory {
                    transitions: Vec::with_capacity(header.len),
                    success: header.success,
                    seed: header.seed,
                },
                header,
            });
        } else {
            let rec = out.last_mut().expect("header precedes transitions");
            let prev = rec.trajectory.transitions.last().map(|t| &t.s_next);
            let t = parse_transition(&ctx, &v, prev)?;
            rec.trajectory.transitions.push(t);
            remaining -= 1;
        }
    }
    if remaining > 0 {
        return Err(Error::Parse {
            line: last_line + 1,
            field: "len".into(),
            message: format!("file ended with {remaining} transitions missing"),
        });
    }
    Ok(out)
}

pub fn read_trajectories_file(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    read_trajectories(BufReader::new(File::open(path)?))
}

pub fn from_jsonl_str(s: &str) -> Result<Vec<TrajectoryRecord>> {
    read_trajectories(s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{REWARD_STEP, REWARD_SUCCESS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_obs(rng: &mut ChaCha8Rng) -> Observation {
        let mut img = Image::zeros(4, 3, 3);
        for v in &mut img.data {
            *v = rng.random_range(0.0..=1.0);
        }
        Observation {
            images: vec![img],
            proprio: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn random_traj(rng: &mut ChaCha8Rng, n: usize) -> Trajectory {
        let mut s = Arc::new(random_obs(rng));
        let mut transitions = Vec::new();
        for i in 0..n {
            let s_next = Arc::new(random_obs(rng));
            let last = i + 1 == n;
            transitions.push(Transition {
                s: s.clone(),
                a: ActionVector((0..2).map(|_| rng.random_range(-1.0..1.0)).collect()),
                r: if last { REWARD_SUCCESS } else { REWARD_STEP },
                s_next: s_next.clone(),
                done: last,
                intervened: rng.random_bool(0.3),
                mc_return: Some(rng.random_range(-5.0..10.0)),
            });
            s = s_next;
        }
        Trajectory {
            transitions,
            success: true,
            seed: rng.random(),
        }
    }

    #[test]
    fn empty_trajectory_round_trips() {
        let t = Trajectory {
            transitions: vec![],
            success: false,
            seed: 3,
        };
        let back = from_jsonl_str(&to_jsonl_string("reach2d", &t, None)).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].trajectory, t);
        assert_eq!(back[0].header.env, "reach2d");
    }

    #[test]
    fn single_success_step_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = random_traj(&mut rng, 1);
        t.transitions[0].r = 10.0;
        let back = from_jsonl_str(&to_jsonl_string("reach2d", &t, None)).unwrap();
        assert_eq!(back[0].trajectory, t);
    }

    #[test]
    fn sixty_steps_serialize_byte_identically_twice() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_traj(&mut rng, 60);
        let first = to_jsonl_string("insert2d", &t, None);
        let back = from_jsonl_str(&first).unwrap();
        assert_eq!(back[0].trajectory, t);
        let second = to_jsonl_string("insert2d", &back[0].trajectory, None);
        assert_eq!(first, second);
        assert!(first.starts_with(
            "{\"format\":\"conrft-traj\",\"version\":1,\"env\":\"insert2d\",\"seed\":"
        ));
    }

    #[test]
    fn multiple_trajectories_and_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_traj(&mut rng, 3);
        let b = random_traj(&mut rng, 2);
        let mut s = to_jsonl_string("reach2d", &a, Some(Label::Positive));
        s.push_str(&to_jsonl_string("reach2d", &b, Some(Label::Negative)));
        let recs = from_jsonl_str(&s).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].header.label, Some(Label::Positive));
        assert_eq!(recs[1].header.label, Some(Label::Negative));
        assert_eq!(recs[1].trajectory, b);
        // shared boundary observations are reused
        let t = &recs[0].trajectory.transitions;
        assert!(Arc::ptr_eq(&t[0].s_next, &t[1].s));
    }

    #[test]
    fn malformed_field_names_line_and_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_traj(&mut rng, 2);
        let text = to_jsonl_string("reach2d", &t, None);
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut v: Value = serde_json::from_str(&lines[2]).unwrap();
        v["r"] = Value::String("ten".into());
        lines[2] = v.to_string();
        let err = from_jsonl_str(&lines.join("\n")).unwrap_err();
        match err {
            Error::Parse { line, field, .. } => {
                assert_eq!(line, 3);
                assert_eq!(field, "r");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = random_traj(&mut rng, 3);
        let text = to_jsonl_string("reach2d", &t, None);
        let cut: Vec<&str> = text.lines().take(2).collect();
        assert!(matches!(
            from_jsonl_str(&cut.join("\n")),
            Err(Error::Parse { field, .. }) if field == "len"
        ));
    }

    #[test]
    fn bad_image_length_names_nested_field() {
        let line = r#"{"format":"conrft-traj","version":1,"env":"reach2d","seed":0,"success":false,"len":1}
{"s":{"images":[{"shape":[2,2,1],"data":"AAAA"}],"proprio":[]},"a":[0.0],"r":-0.05,"s_next":{"images":[],"proprio":[]},"done":true,"intervened":false,"mc_return":null}"#;
        match from_jsonl_str(line).unwrap_err() {
            Error::Parse { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "s.images[0].data");
            }
            other => panic!("unexpected {other}"),
        }
    }

    proptest::proptest! {
        #[test]
        fn rewards_and_floats_survive_round_trip(
            rewards in proptest::collection::vec(proptest::bool::ANY, 1..8),
            ret in -1e6f64..1e6,
            act in -1.0f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut t = random_traj(&mut rng, rewards.len());
            for (tr, ok) in t.transitions.iter_mut().zip(&rewards) {
                tr.r = if *ok { REWARD_SUCCESS } else { REWARD_STEP };
                tr.mc_return = Some(ret);
                tr.a.0[0] = act;
            }
            let back = from_jsonl_str(&to_jsonl_string("reach2d", &t, None)).unwrap();
            for tr in &back[0].trajectory.transitions {
                proptest::prop_assert!(tr.r == REWARD_SUCCESS || tr.r == REWARD_STEP);
            }
            proptest::prop_assert_eq!(&back[0].trajectory, &t);
        }
    }
}
