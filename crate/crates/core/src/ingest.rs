//! LOBSTER message parsing, event classification, inter-arrival
//! normalization, rolling windows and chronological splits.
//!
//! LOBSTER message rows are `time,type,order_id,size,price,direction` with
//! `time` in seconds after midnight. Only submissions (type 1) and
//! cancellations (types 2 and 3) become events by default; executions and
//! halts are dropped unless the [`ClassMapping`] says otherwise.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Lower bound applied to inter-arrival times before taking logarithms.
pub const FLOOR_DT: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("need at least {needed} events, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("event {index}: time {t} precedes the previous event")]
    Unsorted { index: usize, t: f64 },
    #[error("event {index}: class {code} is not below {num_classes}")]
    ClassOutOfRange {
        index: usize,
        code: u8,
        num_classes: usize,
    },
    #[error("event {index}: invalid time {t}")]
    InvalidTime { index: usize, t: f64 },
}

/// One row of a LOBSTER message file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawMessage {
    pub time: f64,
    pub msg_type: u8,
    pub order_id: u64,
    pub size: u64,
    pub price: i64,
    pub direction: i8,
}

fn field<T: std::str::FromStr>(raw: &str, name: &str, line: usize) -> Result<T, IngestError> {
    raw.trim().parse().map_err(|_| IngestError::Parse {
        line,
        message: format!("invalid {name} '{}'", raw.trim()),
    })
}

/// Parses LOBSTER message CSV text. Blank lines are ignored; line numbers
/// in errors are 1-based.
pub fn parse_lobster(text: &str) -> Result<Vec<RawMessage>, IngestError> {
    let mut out = Vec::new();
    for (i, row) in text.lines().enumerate() {
        let line = i + 1;
        if row.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = row.split(',').collect();
        if cols.len() != 6 {
            return Err(IngestError::Parse {
                line,
                message: format!("expected 6 fields, found {}", cols.len()),
            });
        }
        let msg = RawMessage {
            time: field(cols[0], "time", line)?,
            msg_type: field(cols[1], "type", line)?,
            order_id: field(cols[2], "order id", line)?,
            size: field(cols[3], "size", line)?,
            price: field(cols[4], "price", line)?,
            direction: field(cols[5], "direction", line)?,
        };
        if !msg.time.is_finite() || msg.time < 0.0 {
            return Err(IngestError::Parse {
                line,
                message: format!("time {} must be finite and non-negative", msg.time),
            });
        }
        if !(1..=7).contains(&msg.msg_type) {
            return Err(IngestError::Parse {
                line,
                message: format!("message type {} outside 1..=7", msg.msg_type),
            });
        }
        if msg.direction != 1 && msg.direction != -1 {
            return Err(IngestError::Parse {
                line,
                message: format!("direction {} is not +1 or -1", msg.direction),
            });
        }
        out.push(msg);
    }
    Ok(out)
}

/// Writes messages back in LOBSTER column order.
pub fn write_lobster(messages: &[RawMessage]) -> String {
    let mut s = String::new();
    for m in messages {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            m.time, m.msg_type, m.order_id, m.size, m.price, m.direction
        );
    }
    s
}

/// Event class code: 0 bid submit, 1 bid cancel, 2 ask submit, 3 ask cancel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventClass(pub u8);

impl EventClass {
    pub const BID_SUBMIT: EventClass = EventClass(0);
    pub const BID_CANCEL: EventClass = EventClass(1);
    pub const ASK_SUBMIT: EventClass = EventClass(2);
    pub const ASK_CANCEL: EventClass = EventClass(3);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Table from `(msg_type, direction)` to an event class. Pairs absent from
/// the table are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMapping {
    pub rules: Vec<MappingRule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MappingRule {
    pub msg_type: u8,
    pub direction: i8,
    pub class: u8,
}

impl Default for ClassMapping {
    fn default() -> Self {
        let rule = |msg_type, direction, class| MappingRule {
            msg_type,
            direction,
            class,
        };
        Self {
            rules: vec![
                rule(1, 1, 0),
                rule(1, -1, 2),
                rule(2, 1, 1),
                rule(2, -1, 3),
                rule(3, 1, 1),
                rule(3, -1, 3),
            ],
        }
    }
}

impl ClassMapping {
    pub fn map(&self, msg_type: u8, direction: i8) -> Option<EventClass> {
        self.rules
            .iter()
            .find(|r| r.msg_type == msg_type && r.direction == direction)
            .map(|r| EventClass(r.class))
    }

    /// Number of distinct classes the table can emit (max code + 1).
    pub fn num_classes(&self) -> usize {
        self.rules.iter().map(|r| r.class as usize + 1).max().unwrap_or(0)
    }
}

/// Default mapping: submissions and cancellations per side; executions
/// (4, 5) and halts (7) map to `None`.
pub fn map_event_class(msg_type: u8, direction: i8) -> Option<EventClass> {
    ClassMapping::default().map(msg_type, direction)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub e: EventClass,
}

impl Event {
    pub fn new(t: f64, e: u8) -> Self {
        Self { t, e: EventClass(e) }
    }
}

/// Time-ordered events over `num_classes` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStream {
    events: Vec<Event>,
    num_classes: usize,
}

impl EventStream {
    pub fn new(events: Vec<Event>, num_classes: usize) -> Result<Self, IngestError> {
        for (i, ev) in events.iter().enumerate() {
            if !ev.t.is_finite() || ev.t < 0.0 {
                return Err(IngestError::InvalidTime { index: i, t: ev.t });
            }
            if ev.e.index() >= num_classes {
                return Err(IngestError::ClassOutOfRange {
                    index: i,
                    code: ev.e.0,
                    num_classes,
                });
            }
            if i > 0 && ev.t < events[i - 1].t {
                return Err(IngestError::Unsorted { index: i, t: ev.t });
            }
        }
        Ok(Self {
            events,
            num_classes,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn slice(&self, range: Range<usize>) -> EventStream {
        EventStream {
            events: self.events[range].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Inter-arrival gaps `t_i - t_{i-1}` for `i >= 1`, floored at [`FLOOR_DT`].
    pub fn gaps(&self) -> Vec<f64> {
        self.events
            .windows(2)
            .map(|w| (w[1].t - w[0].t).max(FLOOR_DT))
            .collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for ev in &self.events {
            h[ev.e.index()] += 1;
        }
        h
    }
}

/// Result of classifying raw messages.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedMessages {
    pub stream: EventStream,
    pub parsed: usize,
    pub mapped: usize,
    pub dropped: usize,
}

pub fn map_messages(
    messages: &[RawMessage],
    mapping: &ClassMapping,
) -> Result<MappedMessages, IngestError> {
    let events: Vec<Event> = messages
        .iter()
        .filter_map(|m| mapping.map(m.msg_type, m.direction).map(|e| Event { t: m.time, e }))
        .collect();
    let mapped = events.len();
    let stream = EventStream::new(events, mapping.num_classes())?;
    Ok(MappedMessages {
        stream,
        parsed: messages.len(),
        mapped,
        dropped: messages.len() - mapped,
    })
}

/// Standardization constants for `log10` inter-arrival times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean_log_dt: f64,
    pub std_log_dt: f64,
    pub floor_dt: f64,
}

impl NormStats {
    /// Standardized `log10` of an inter-arrival time.
    pub fn standardize(&self, dt: f64) -> f64 {
        (dt.max(self.floor_dt).log10() - self.mean_log_dt) / self.std_log_dt
    }

    /// Inverse of [`standardize`](Self::standardize), floored at `floor_dt`.
    pub fn destandardize(&self, raw: f64) -> f64 {
        let dt = 10f64.powf(raw * self.std_log_dt + self.mean_log_dt);
        if dt.is_finite() {
            dt.max(self.floor_dt)
        } else {
            f64::MAX
        }
    }
}

/// Statistics of `log10(dt)` over the gaps inside `training_range`.
/// A zero spread (all gaps equal) is replaced by 1.
pub fn normalize_times(
    stream: &EventStream,
    training_range: Range<usize>,
) -> Result<NormStats, IngestError> {
    let n = training_range.len();
    if n < 2 || training_range.end > stream.len() {
        return Err(IngestError::TooShort {
            needed: 2,
            got: n.min(stream.len()),
        });
    }
    let logs: Vec<f64> = stream.slice(training_range).gaps().iter().map(|d| d.log10()).collect();
    let m = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / m;
    let var = logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    let std = var.sqrt();
    Ok(NormStats {
        mean_log_dt: mean,
        std_log_dt: if std > 1e-12 { std } else { 1.0 },
        floor_dt: FLOOR_DT,
    })
}

/// `L` consecutive events and the event that follows them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub context: Vec<Event>,
    pub target: Event,
}

impl TrainingPair {
    /// Gap between the last context event and the target.
    pub fn target_gap(&self) -> f64 {
        let last = self.context.last().map_or(self.target.t, |e| e.t);
        (self.target.t - last).max(FLOOR_DT)
    }
}

/// Rolling windows with stride one: `T - L` pairs.
pub fn build_windows(stream: &EventStream, window: usize) -> Result<Vec<TrainingPair>, IngestError> {
    if window == 0 || stream.len() <= window {
        return Err(IngestError::TooShort {
            needed: window + 1,
            got: stream.len(),
        });
    }
    let ev = stream.events();
    Ok((0..stream.len() - window)
        .map(|j| TrainingPair {
            context: ev[j..j + window].to_vec(),
            target: ev[j + window],
        })
        .collect())
}

/// Contiguous chronological train/valid/test split. Each part must hold at
/// least `window + 1` events so it yields at least one pair.
pub fn split_stream(
    stream: &EventStream,
    fractions: (f64, f64, f64),
    window: usize,
) -> Result<(EventStream, EventStream, EventStream), IngestError> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(IngestError::InvalidFractions(format!(
            "{a}/{b}/{c}: every fraction must be positive"
        )));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(IngestError::InvalidFractions(format!("{a}/{b}/{c} do not sum to 1")));
    }
    let t = stream.len();
    let n_train = ((t as f64) * a).round() as usize;
    let n_valid = (((t as f64) * b).round() as usize).min(t - n_train.min(t));
    let n_train = n_train.min(t);
    let n_test = t - n_train - n_valid;
    for n in [n_train, n_valid, n_test] {
        if n < window + 1 {
            return Err(IngestError::TooShort {
                needed: window + 1,
                got: n,
            });
        }
    }
    Ok((
        stream.slice(0..n_train),
        stream.slice(n_train..n_train + n_valid),
        stream.slice(n_train + n_valid..t),
    ))
}

/// Sizes the chronological split would produce, without validation.
pub fn split_sizes(len: usize, fractions: (f64, f64, f64)) -> (usize, usize, usize) {
    let n_train = (((len as f64) * fractions.0).round() as usize).min(len);
    let n_valid = (((len as f64) * fractions.1).round() as usize).min(len - n_train);
    (n_train, n_valid, len - n_train - n_valid)
}

/// `t,e` CSV with a header row.
pub fn write_events_csv(stream: &EventStream) -> String {
    let mut s = String::from("t,e\n");
    for ev in stream.events() {
        let _ = writeln!(s, "{},{}", ev.t, ev.e.0);
    }
    s
}

/// Reads a `t,e` CSV. With `num_classes = None` the class count is one more
/// than the largest code present.
pub fn read_events_csv(text: &str, num_classes: Option<usize>) -> Result<EventStream, IngestError> {
    let mut events = Vec::new();
    for (i, row) in text.lines().enumerate() {
        let line = i + 1;
        let row = row.trim();
        if row.is_empty() || (line == 1 && row.eq_ignore_ascii_case("t,e")) {
            continue;
        }
        let mut parts = row.split(',');
        let (Some(t), Some(e), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(IngestError::Parse {
                line,
                message: "expected 2 fields".into(),
            });
        };
        events.push(Event {
            t: field(t, "time", line)?,
            e: EventClass(field(e, "class", line)?),
        });
    }
    let c = num_classes
        .unwrap_or_else(|| events.iter().map(|e| e.e.index() + 1).max().unwrap_or(1));
    EventStream::new(events, c)
}
