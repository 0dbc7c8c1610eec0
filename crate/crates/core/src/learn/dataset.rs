use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use super::LearnError;
use crate::policy::Instruction;
use crate::sensor::Observation;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub obs: Observation,
    pub y_s: f64,
    pub y_t: f64,
    pub y_c: Instruction,
}

impl Sample {
    pub fn validate(&self) -> Result<(), LearnError> {
        let ok = self.y_s.is_finite()
            && self.y_t.is_finite()
            && (-1.0..=1.0).contains(&self.y_s)
            && (0.0..=1.0).contains(&self.y_t);
        if !ok {
            return Err(LearnError::InvalidData(format!(
                "labels out of range: steering {} throttle {}",
                self.y_s, self.y_t
            )));
        }
        if self.obs.pixels.len() != self.obs.width * self.obs.height {
            return Err(LearnError::InvalidData("observation size mismatch".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteSpan {
    pub start: usize,
    pub len: usize,
    pub class: Instruction,
}

/// Demonstration samples grouped into labelled routes. Routes partition the
/// sample list in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DemoDataset {
    pub samples: Vec<Sample>,
    pub routes: Vec<RouteSpan>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    obs: Vec<Vec<f32>>,
    y_s: f64,
    y_t: f64,
    y_c: u8,
    route: usize,
    tick: u64,
}

impl DemoDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Appends a route; every sample is relabelled with the route class.
    pub fn push_route(&mut self, class: Instruction, samples: Vec<Sample>) {
        if samples.is_empty() {
            return;
        }
        let start = self.samples.len();
        let len = samples.len();
        self.samples.extend(samples.into_iter().map(|s| Sample { y_c: class, ..s }));
        self.routes.push(RouteSpan { start, len, class });
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        let mut next = 0;
        for (i, r) in self.routes.iter().enumerate() {
            if r.start != next || r.len == 0 {
                return Err(LearnError::InvalidData(format!("route {i} does not continue the partition")));
            }
            next += r.len;
            if self.samples[r.start..next].iter().any(|s| s.y_c != r.class) {
                return Err(LearnError::InvalidData(format!("route {i} mixes classes")));
            }
        }
        if next != self.samples.len() {
            return Err(LearnError::InvalidData("routes do not cover every sample".into()));
        }
        self.samples.iter().try_for_each(Sample::validate)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), LearnError> {
        for (ri, r) in self.routes.iter().enumerate() {
            for s in &self.samples[r.start..r.start + r.len] {
                let rec = Record {
                    obs: s.obs.rows().map(<[f32]>::to_vec).collect(),
                    y_s: s.y_s,
                    y_t: s.y_t,
                    y_c: s.y_c.index() as u8,
                    route: ri,
                    tick: s.obs.tick,
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, LearnError> {
        let mut data = DemoDataset::default();
        let mut current: Option<(usize, Instruction, Vec<Sample>)> = None;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| LearnError::InvalidData(format!("line {}: {e}", lineno + 1)))?;
            let y_c = Instruction::from_index(rec.y_c as usize)
                .ok_or_else(|| LearnError::InvalidData(format!("line {}: bad class {}", lineno + 1, rec.y_c)))?;
            let height = rec.obs.len();
            let width = rec.obs.first().map_or(0, Vec::len);
            if height == 0 || rec.obs.iter().any(|row| row.len() != width) {
                return Err(LearnError::InvalidData(format!("line {}: ragged observation", lineno + 1)));
            }
            let obs = Observation { width, height, pixels: rec.obs.concat(), tick: rec.tick };
            let sample = Sample { obs, y_s: rec.y_s, y_t: rec.y_t, y_c };
            match &mut current {
                Some((id, class, samples)) if *id == rec.route => {
                    if *class != y_c {
                        return Err(LearnError::InvalidData(format!(
                            "line {}: route {} changes class",
                            lineno + 1,
                            rec.route
                        )));
                    }
                    samples.push(sample);
                }
                _ => {
                    if let Some((_, class, samples)) = current.take() {
                        data.push_route(class, samples);
                    }
                    current = Some((rec.route, y_c, vec![sample]));
                }
            }
        }
        if let Some((_, class, samples)) = current {
            data.push_route(class, samples);
        }
        data.validate()?;
        Ok(data)
    }

    /// Writes JSON Lines, gzip-compressed when the path ends in `.gz`.
    pub fn save(&self, path: &Path) -> Result<(), LearnError> {
        let f = BufWriter::new(File::create(path)?);
        if is_gz(path) {
            let mut enc = GzEncoder::new(f, Compression::default());
            self.write_jsonl(&mut enc)?;
            enc.finish()?;
        } else {
            self.write_jsonl(f)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LearnError> {
        let f = File::open(path)?;
        let reader: Box<dyn Read> = if is_gz(path) { Box::new(GzDecoder::new(f)) } else { Box::new(f) };
        Self::read_jsonl(BufReader::new(reader))
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(w: usize, h: usize, seed: u32, class: Instruction) -> Sample {
        let mut obs = Observation::blank(w, h);
        for (i, p) in obs.pixels.iter_mut().enumerate() {
            *p = (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 999.0;
        }
        obs.tick = seed as u64;
        Sample { obs, y_s: -0.25, y_t: 0.05, y_c: class }
    }

    #[test]
    fn gzip_round_trip() {
        let mut d = DemoDataset::default();
        d.push_route(Instruction::Left, vec![sample(4, 2, 1, Instruction::Left), sample(4, 2, 2, Instruction::Left)]);
        d.push_route(Instruction::Right, vec![sample(4, 2, 3, Instruction::Right)]);
        let dir = std::env::temp_dir().join(format!("sfd-ds-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        for name in ["d.jsonl", "d.jsonl.gz"] {
            let p = dir.join(name);
            d.save(&p).unwrap();
            assert_eq!(DemoDataset::load(&p).unwrap(), d);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn consecutive_routes_with_same_class_stay_separate() {
        let mut d = DemoDataset::default();
        d.push_route(Instruction::Middle, vec![sample(2, 2, 1, Instruction::Middle)]);
        d.push_route(Instruction::Middle, vec![sample(2, 2, 2, Instruction::Middle)]);
        let mut buf = Vec::new();
        d.write_jsonl(&mut buf).unwrap();
        let back = DemoDataset::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back.routes.len(), 2);
    }

    #[test]
    fn rejects_bad_records() {
        let ragged = r#"{"obs":[[0.1,0.2],[0.3]],"y_s":0.0,"y_t":0.1,"y_c":1,"route":0,"tick":0}"#;
        assert!(DemoDataset::read_jsonl(ragged.as_bytes()).is_err());
        let class = r#"{"obs":[[0.1]],"y_s":0.0,"y_t":0.1,"y_c":7,"route":0,"tick":0}"#;
        assert!(DemoDataset::read_jsonl(class.as_bytes()).is_err());
        let range = r#"{"obs":[[0.1]],"y_s":2.0,"y_t":0.1,"y_c":0,"route":0,"tick":0}"#;
        assert!(DemoDataset::read_jsonl(range.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn jsonl_round_trip_is_lossless(
            routes in prop::collection::vec((0usize..3, prop::collection::vec((-1.0f64..=1.0, 0.0f64..=1.0, prop::collection::vec(0.0f32..=1.0, 6)), 1..4)), 1..4)
        ) {
            let mut d = DemoDataset::default();
            for (ri, (class, samples)) in routes.into_iter().enumerate() {
                let class = Instruction::from_index(class).unwrap();
                let samples = samples
                    .into_iter()
                    .enumerate()
                    .map(|(i, (y_s, y_t, px))| Sample {
                        obs: Observation { width: 3, height: 2, pixels: px, tick: (ri * 100 + i) as u64 },
                        y_s,
                        y_t,
                        y_c: class,
                    })
                    .collect();
                d.push_route(class, samples);
            }
            let mut buf = Vec::new();
            d.write_jsonl(&mut buf).unwrap();
            prop_assert_eq!(DemoDataset::read_jsonl(&buf[..]).unwrap(), d);
        }
    }
}
