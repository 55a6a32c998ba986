use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{PanelDataset, SynthError};

/// Column layout recovered from a header row.
struct Layout {
    dim_x: usize,
    dim_u: Option<usize>,
    s_true: bool,
    dim_z: Option<usize>,
    true_ace: bool,
}

impl Layout {
    fn of(d: &PanelDataset) -> Self {
        Self {
            dim_x: d.dim_x,
            dim_u: d.u.as_ref().map(|(k, _)| *k),
            s_true: d.s_true.is_some(),
            dim_z: d.z_true.as_ref().map(|(k, _)| *k),
            true_ace: d.true_ace.is_some(),
        }
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["sample".to_string(), "t".to_string()];
        h.extend((0..self.dim_x).map(|j| format!("x_{j}")));
        h.push("w".into());
        h.push("y".into());
        if let Some(k) = self.dim_u {
            h.extend((0..k).map(|j| format!("u_{j}")));
        }
        if self.s_true {
            h.push("s_true".into());
        }
        if let Some(k) = self.dim_z {
            h.extend((0..k).map(|j| format!("z_{j}")));
        }
        if self.true_ace {
            h.push("true_ace".into());
        }
        h
    }

    fn parse(header: &csv::StringRecord) -> Result<Self, SynthError> {
        let cols: Vec<&str> = header.iter().collect();
        let mut pos = 0;
        let mut expect = |name: &str| -> Result<(), SynthError> {
            match cols.get(pos) {
                Some(c) if *c == name => {
                    pos += 1;
                    Ok(())
                }
                Some(c) => Err(SynthError::Header(format!("expected `{name}` at column {}, found `{c}`", pos + 1))),
                None => Err(SynthError::Header(format!("missing column `{name}`"))),
            }
        };
        expect("sample")?;
        expect("t")?;
        drop(expect);

        let block = |pos: &mut usize, prefix: &str| -> usize {
            let mut k = 0;
            while cols.get(*pos).is_some_and(|c| *c == format!("{prefix}_{k}")) {
                k += 1;
                *pos += 1;
            }
            k
        };
        let dim_x = block(&mut pos, "x");
        if dim_x == 0 {
            return Err(SynthError::Header("no x_0 column".into()));
        }
        for name in ["w", "y"] {
            if cols.get(pos) != Some(&name) {
                return Err(SynthError::Header(format!("expected `{name}` at column {}", pos + 1)));
            }
            pos += 1;
        }
        let dim_u = Some(block(&mut pos, "u")).filter(|&k| k > 0);
        let s_true = cols.get(pos) == Some(&"s_true");
        pos += usize::from(s_true);
        let dim_z = Some(block(&mut pos, "z")).filter(|&k| k > 0);
        let true_ace = cols.get(pos) == Some(&"true_ace");
        pos += usize::from(true_ace);
        if let Some(extra) = cols.get(pos) {
            return Err(SynthError::Header(format!("unexpected column `{extra}` at column {}", pos + 1)));
        }
        Ok(Self { dim_x, dim_u, s_true, dim_z, true_ace })
    }

    fn width(&self) -> usize {
        self.header().len()
    }
}

pub fn write_panel(d: &PanelDataset, path: &Path) -> Result<(), SynthError> {
    let mut f = BufWriter::new(File::create(path)?);
    write_panel_to(d, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Writes rows sorted by `(sample, t)` with `t` starting at 1. Floats use
/// the shortest representation that parses back to the same value.
pub fn write_panel_to(d: &PanelDataset, out: impl Write) -> Result<(), SynthError> {
    d.validate()?;
    let layout = Layout::of(d);
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(layout.header())?;
    let mut row: Vec<String> = Vec::with_capacity(layout.width());
    for i in 0..d.n_samples {
        for t in 0..d.horizon {
            row.clear();
            row.push(i.to_string());
            row.push((t + 1).to_string());
            row.extend(d.x_at(i, t).iter().map(f64::to_string));
            row.push(d.w_at(i, t).to_string());
            row.push(d.y_at(i, t).to_string());
            if let Some(u) = d.u_at(i, t) {
                row.extend(u.iter().map(f64::to_string));
            }
            if let Some(s) = d.s_at(i, t) {
                row.push(s.to_string());
            }
            if let Some(z) = d.z_at(i, t) {
                row.extend(z.iter().map(f64::to_string));
            }
            if let Some(ace) = &d.true_ace {
                row.push(ace[t].to_string());
            }
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_panel(path: &Path) -> Result<PanelDataset, SynthError> {
    read_panel_from(File::open(path)?)
}

pub fn read_panel_from(input: impl Read) -> Result<PanelDataset, SynthError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header = rdr.headers()?.clone();
    let layout = Layout::parse(&header)?;
    let width = layout.width();

    let mut x = Vec::new();
    let mut w = Vec::new();
    let mut y = Vec::new();
    let mut u = Vec::new();
    let mut s = Vec::new();
    let mut z = Vec::new();
    let mut ace = Vec::new();
    // (sample, t, line) per row, checked against the sorted layout afterwards.
    let mut keys: Vec<(usize, usize, usize)> = Vec::new();

    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let err = |column: &str, message: String| SynthError::Parse { line, column: column.to_string(), message };
        if record.len() != width {
            return Err(err("*", format!("expected {width} fields, found {}", record.len())));
        }
        let num = |k: usize| -> Result<f64, SynthError> {
            let cell = &record[k];
            match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(v) => Err(err(&header[k], format!("non-finite value {v}"))),
                Err(_) => Err(err(&header[k], format!("cannot parse `{cell}` as a number"))),
            }
        };
        let index = |k: usize| -> Result<usize, SynthError> {
            record[k].trim().parse::<usize>().map_err(|_| err(&header[k], format!("bad index `{}`", &record[k])))
        };
        keys.push((index(0)?, index(1)?, line));

        let mut k = 2;
        let mut take = |n: usize, into: &mut Vec<f64>| -> Result<(), SynthError> {
            for _ in 0..n {
                into.push(num(k)?);
                k += 1;
            }
            Ok(())
        };
        take(layout.dim_x, &mut x)?;
        take(1, &mut w)?;
        if let Some(&wv) = w.last().filter(|&&v| v != 0.0 && v != 1.0) {
            return Err(err("w", format!("treatment must be 0 or 1, found {wv}")));
        }
        take(1, &mut y)?;
        take(layout.dim_u.unwrap_or(0), &mut u)?;
        take(usize::from(layout.s_true), &mut s)?;
        take(layout.dim_z.unwrap_or(0), &mut z)?;
        take(usize::from(layout.true_ace), &mut ace)?;
    }

    let Some(&(first, _, _)) = keys.first() else {
        return Err(SynthError::Shape("no data rows".into()));
    };
    let horizon = keys.iter().take_while(|k| k.0 == first).count();
    for (r, &(sample, t, line)) in keys.iter().enumerate() {
        let want = (r / horizon, r % horizon + 1);
        if (sample, t) != want {
            return Err(SynthError::Parse {
                line,
                column: "sample".into(),
                message: format!("expected row ({}, {}), found ({sample}, {t})", want.0, want.1),
            });
        }
    }
    if keys.len() % horizon != 0 {
        return Err(SynthError::Shape(format!("last sample has fewer than {horizon} steps")));
    }
    let true_ace = if layout.true_ace {
        let per_step = ace[..horizon].to_vec();
        for (r, v) in ace.iter().enumerate() {
            if *v != per_step[r % horizon] {
                return Err(SynthError::Parse {
                    line: keys[r].2,
                    column: "true_ace".into(),
                    message: "true_ace differs from the first sample".into(),
                });
            }
        }
        Some(per_step)
    } else {
        None
    };

    let d = PanelDataset {
        n_samples: keys.len() / horizon,
        horizon,
        dim_x: layout.dim_x,
        x,
        w,
        y,
        u: layout.dim_u.map(|k| (k, u)),
        s_true: layout.s_true.then_some(s),
        z_true: layout.dim_z.map(|k| (k, z)),
        true_ace,
    };
    d.validate()?;
    Ok(d)
}
