use std::fmt;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub enum LogEntry {
    Step { step: u64, loss: f64 },
    Epoch { epoch: usize, ccc_v: f64, ccc_a: f64 },
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogEntry::Step { step, loss } => write!(f, "step={step} loss={loss:.9}"),
            LogEntry::Epoch { epoch, ccc_v, ccc_a } => {
                write!(f, "epoch={epoch} ccc_v={ccc_v:.6} ccc_a={ccc_a:.6}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    /// Seconds spent training; not part of the serialized log.
    pub wall_seconds: f64,
}

impl TrainLog {
    pub fn steps(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.entries.iter().filter_map(|e| match *e {
            LogEntry::Step { step, loss } => Some((step, loss)),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.entries.iter().filter_map(|e| match *e {
            LogEntry::Epoch { epoch, ccc_v, ccc_a } => Some((epoch, ccc_v, ccc_a)),
            _ => None,
        })
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| format!("{e}\n")).collect()
    }
}

/// Parse log text. Blank lines are skipped; any other line must be a step
/// or epoch record with finite values.
pub fn parse_log(text: &str) -> Result<TrainLog, String> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |what: &str| format!("line {}: {what}: `{line}`", i + 1);
        let mut fields = Vec::new();
        for part in line.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(|| err("expected key=value fields"))?;
            fields.push((k, v));
        }
        let num = |v: &str| v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| err("bad number"));
        let entry = match fields.as_slice() {
            [("step", s), ("loss", l)] => LogEntry::Step {
                step: s.parse().map_err(|_| err("bad step"))?,
                loss: num(l)?,
            },
            [("epoch", e), ("ccc_v", v), ("ccc_a", a)] => LogEntry::Epoch {
                epoch: e.parse().map_err(|_| err("bad epoch"))?,
                ccc_v: num(v)?,
                ccc_a: num(a)?,
            },
            _ => return Err(err("unrecognized record")),
        };
        entries.push(entry);
    }
    Ok(TrainLog {
        entries,
        wall_seconds: 0.0,
    })
}
