//! Input encodings and event-file parsing.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RealTensor, Shape};

/// Replicates a single-step input `T` times.
pub fn direct_encode(image: &RealTensor, t_steps: usize) -> Result<RealTensor> {
    let s = image.shape();
    if s.t != 1 {
        return Err(Error::dim(format!("direct encoding expects one time step, got {s}")));
    }
    if t_steps == 0 {
        return Err(Error::Argument("direct encoding needs T >= 1".into()));
    }
    let mut data = Vec::with_capacity(s.numel() * t_steps);
    for _ in 0..t_steps {
        data.extend_from_slice(image.data());
    }
    RealTensor::from_vec(s.with_t(t_steps), data)
}

/// One event: timestamp in microseconds, pixel, polarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: u64,
    pub x: u32,
    pub y: u32,
    pub p: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub t_steps: usize,
    /// Window length in microseconds, starting at 0.
    pub window_us: u64,
    pub width: usize,
    pub height: usize,
    /// Per-cell count clip; `None` means unbounded.
    #[serde(default)]
    pub clip: Option<u32>,
    /// Divide counts by the clip value (or the maximum count if unbounded).
    #[serde(default)]
    pub normalize: bool,
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_steps == 0 || self.window_us == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "event encoding needs T, window and sensor size > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Time bin of timestamp `t`, or `None` outside the window. The window
    /// end itself belongs to the last bin.
    pub fn bin(&self, t: u64) -> Option<usize> {
        if t > self.window_us {
            return None;
        }
        let b = (t as u128 * self.t_steps as u128 / self.window_us as u128) as usize;
        Some(b.min(self.t_steps - 1))
    }
}

/// Accumulates events into a `(T, 2, H, W)` count tensor; channel is the
/// polarity. Events outside the window are skipped.
pub fn event_bin(events: &[EventRecord], cfg: &EncodingConfig) -> Result<RealTensor> {
    cfg.validate()?;
    let shape = Shape::new(cfg.t_steps, 2, cfg.height, cfg.width);
    let mut counts = vec![0u32; shape.numel()];
    for (i, e) in events.iter().enumerate() {
        if e.x as usize >= cfg.width || e.y as usize >= cfg.height {
            return Err(Error::Record {
                index: i,
                msg: format!(
                    "pixel ({}, {}) outside {}x{} sensor",
                    e.x, e.y, cfg.width, cfg.height
                ),
            });
        }
        if e.p > 1 {
            return Err(Error::Record {
                index: i,
                msg: format!("polarity {} not in {{0, 1}}", e.p),
            });
        }
        let Some(b) = cfg.bin(e.t) else { continue };
        let idx = shape.index(b, 0, e.p as usize, e.y as usize, e.x as usize);
        counts[idx] = counts[idx].saturating_add(1);
    }
    if let Some(c) = cfg.clip {
        counts.iter_mut().for_each(|v| *v = (*v).min(c));
    }
    let scale = if cfg.normalize {
        let m = cfg.clip.unwrap_or_else(|| counts.iter().copied().max().unwrap_or(0));
        if m > 0 {
            1.0 / m as f64
        } else {
            1.0
        }
    } else {
        1.0
    };
    RealTensor::from_vec(shape, counts.iter().map(|&v| v as f64 * scale).collect())
}

/// Parses `t_us,x,y,p` lines. A first line whose first field is not a
/// number is treated as a header.
pub fn parse_event_csv(reader: impl Read) -> Result<Vec<EventRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 1;
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(line),
            msg: e.to_string(),
        })?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if i == 0 && rec.get(0).is_some_and(|f| f.parse::<u64>().is_err()) {
            continue;
        }
        let err = |msg: String| Error::Parse { line, msg };
        if rec.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", rec.len())));
        }
        let field = |k: usize, name: &str| {
            rec[k]
                .parse::<u64>()
                .map_err(|_| err(format!("invalid {name} {:?}", &rec[k])))
        };
        let t = field(0, "timestamp")?;
        let x = field(1, "x")?;
        let y = field(2, "y")?;
        let p = field(3, "polarity")?;
        if p > 1 {
            return Err(err(format!("polarity {p} not in {{0, 1}}")));
        }
        let coord = |v: u64, name: &str| u32::try_from(v).map_err(|_| err(format!("{name} {v} out of range")));
        out.push(EventRecord {
            t,
            x: coord(x, "x")?,
            y: coord(y, "y")?,
            p: p as u8,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EncodingConfig {
        EncodingConfig {
            t_steps: 4,
            window_us: 100_000,
            width: 4,
            height: 3,
            clip: None,
            normalize: false,
        }
    }

    fn ev(t: u64, x: u32, y: u32, p: u8) -> EventRecord {
        EventRecord { t, x, y, p }
    }

    #[test]
    fn direct_encoding() {
        let img = RealTensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, -2.0, 0.5]).unwrap();
        let x = direct_encode(&img, 3).unwrap();
        assert_eq!(x.shape().t, 3);
        for t in 0..3 {
            assert_eq!(x.time_slice(t), img);
        }
        assert_eq!(direct_encode(&img, 1).unwrap(), img);
        assert!((x.sum() - 3.0 * img.sum()).abs() < 1e-12);
    }

    #[test]
    fn bin_boundaries() {
        let c = cfg();
        assert_eq!(c.bin(10_000), Some(0));
        assert_eq!(c.bin(99_000), Some(3));
        assert_eq!(c.bin(24_999), Some(0));
        assert_eq!(c.bin(25_000), Some(1));
        assert_eq!(c.bin(75_000), Some(3));
        assert_eq!(c.bin(100_000), Some(3));
        assert_eq!(c.bin(100_001), None);
    }

    #[test]
    fn counts_and_clip() {
        let mut c = cfg();
        let events = [ev(1, 2, 1, 1), ev(2, 2, 1, 1), ev(3, 0, 0, 0), ev(200_000, 0, 0, 0)];
        let x = event_bin(&events, &c).unwrap();
        assert_eq!(x.get(0, 0, 1, 1, 2), 2.0);
        assert_eq!(x.sum(), 3.0);
        c.clip = Some(1);
        assert_eq!(event_bin(&events, &c).unwrap().get(0, 0, 1, 1, 2), 1.0);
        c.clip = Some(4);
        c.normalize = true;
        assert_eq!(event_bin(&events, &c).unwrap().get(0, 0, 1, 1, 2), 0.5);
        let err = event_bin(&[ev(0, 0, 0, 0), ev(0, 4, 0, 0)], &cfg()).unwrap_err();
        assert!(matches!(err, Error::Record { index: 1, .. }));
    }

    #[test]
    fn csv_parsing() {
        let r = parse_event_csv("1000,5,7,1\n".as_bytes()).unwrap();
        assert_eq!(r, vec![ev(1000, 5, 7, 1)]);
        let r = parse_event_csv("t,x,y,p\n1000,5,7,1\n2000,1,2,0\n".as_bytes()).unwrap();
        assert_eq!(r.len(), 2);
        let e = parse_event_csv("t,x,y,p\n1000,5,7,2\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = parse_event_csv("1,1,1,1\n2,1,x,1\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = parse_event_csv("1,1,1\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
    }
}
