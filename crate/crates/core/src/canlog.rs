//! CAN frame model, Car-Hacking-format log parsing and synthetic traffic
//! generation.
//!
//! Log records are comma separated: timestamp, hex CAN id, decimal DLC,
//! `DLC` hex data bytes and an optional flag column (`R` normal, `T`
//! injected). Capture files without the flag column parse as all-normal
//! traffic.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest 11-bit base-format CAN identifier.
pub const MAX_BASE_ID: u16 = 0x7FF;
/// Largest CAN 2.0 payload length.
pub const MAX_DLC: usize = 8;
/// Packed width of one frame: 2 big-endian id bytes + 8 padded payload bytes.
pub const FRAME_BYTES: usize = 10;

/// Ground-truth class of one message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Attack,
}

impl Label {
    pub fn is_attack(self) -> bool {
        self == Label::Attack
    }

    fn flag_char(self) -> char {
        match self {
            Label::Normal => 'R',
            Label::Attack => 'T',
        }
    }
}

/// One CAN message together with its ground-truth label.
///
/// The DLC is not stored separately: it is always `payload.len()`, which
/// keeps the length invariant true by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub timestamp: f64,
    pub can_id: u16,
    payload: Vec<u8>,
    pub label: Label,
}

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("CAN id {0:#05x} exceeds the 11-bit base range")]
    IdOutOfRange(u32),
    #[error("payload of {0} bytes exceeds the {MAX_DLC}-byte CAN limit")]
    PayloadTooLong(usize),
    #[error("timestamp {0} is not finite")]
    BadTimestamp(f64),
}

impl LabeledFrame {
    pub fn new(
        timestamp: f64,
        can_id: u16,
        payload: Vec<u8>,
        label: Label,
    ) -> Result<Self, FrameError> {
        if !timestamp.is_finite() {
            return Err(FrameError::BadTimestamp(timestamp));
        }
        if can_id > MAX_BASE_ID {
            return Err(FrameError::IdOutOfRange(can_id as u32));
        }
        if payload.len() > MAX_DLC {
            return Err(FrameError::PayloadTooLong(payload.len()));
        }
        Ok(Self { timestamp, can_id, payload, label })
    }

    pub fn dlc(&self) -> u8 {
        self.payload.len() as u8
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Packs the frame into the fixed 10-byte detector input layout:
    /// big-endian 16-bit id followed by the payload right-padded with zeros.
    pub fn encode_bytes(&self) -> [u8; FRAME_BYTES] {
        let mut out = [0u8; FRAME_BYTES];
        out[0..2].copy_from_slice(&self.can_id.to_be_bytes());
        out[2..2 + self.payload.len()].copy_from_slice(&self.payload);
        out
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseErrorKind {
    #[error("record has {0} fields, expected at least timestamp, id and DLC")]
    TooFewFields(usize),
    #[error("invalid timestamp {0:?}")]
    Timestamp(String),
    #[error("invalid hex in CAN id field {0:?}")]
    CanId(String),
    #[error("CAN id {0:#05x} exceeds the 11-bit base range")]
    IdOutOfRange(u32),
    #[error("invalid DLC field {0:?}")]
    Dlc(String),
    #[error("DLC {0} out of range 0..={MAX_DLC}")]
    DlcOutOfRange(u32),
    #[error("invalid hex in data byte {index}: {text:?}")]
    DataByte { index: usize, text: String },
    #[error("expected {expected} data bytes, found {found}")]
    ByteCount { expected: usize, found: usize },
    #[error("invalid flag {0:?}, expected R or T")]
    Flag(String),
}

/// Parse failure for a log record, carrying the 1-based line number when the
/// record came from a file.
#[derive(Debug, Error, PartialEq)]
pub struct ParseError {
    pub line: Option<usize>,
    pub kind: ParseErrorKind,
}

impl ParseError {
    fn new(kind: ParseErrorKind) -> Self {
        Self { line: None, kind }
    }

    pub fn at_line(mut self, line: usize) -> Self {
        self.line = Some(line);
        self
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(n) => write!(f, "line {n}: {}", self.kind),
            None => write!(f, "{}", self.kind),
        }
    }
}

/// Decodes one comma-separated log record.
///
/// Hex fields parse case-insensitively; a missing flag column means
/// [`Label::Normal`].
pub fn parse_frame_record(line: &str) -> Result<LabeledFrame, ParseError> {
    let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
    if fields.len() < 3 {
        return Err(ParseError::new(ParseErrorKind::TooFewFields(fields.len())));
    }

    let timestamp: f64 = fields[0]
        .parse()
        .ok()
        .filter(|t: &f64| t.is_finite())
        .ok_or_else(|| ParseError::new(ParseErrorKind::Timestamp(fields[0].to_string())))?;

    let can_id = u32::from_str_radix(fields[1], 16)
        .map_err(|_| ParseError::new(ParseErrorKind::CanId(fields[1].to_string())))?;
    if can_id > MAX_BASE_ID as u32 {
        return Err(ParseError::new(ParseErrorKind::IdOutOfRange(can_id)));
    }

    let dlc: u32 = fields[2]
        .parse()
        .map_err(|_| ParseError::new(ParseErrorKind::Dlc(fields[2].to_string())))?;
    if dlc as usize > MAX_DLC {
        return Err(ParseError::new(ParseErrorKind::DlcOutOfRange(dlc)));
    }
    let dlc = dlc as usize;

    let rest = &fields[3..];
    let (data_fields, flag) = match rest.len() {
        n if n == dlc => (rest, None),
        n if n == dlc + 1 => (&rest[..dlc], Some(rest[dlc])),
        n => {
            // Too many / too few trailing fields: report against the byte
            // count, ignoring at most one flag column.
            let found = if n > dlc { n - 1 } else { n };
            return Err(ParseError::new(ParseErrorKind::ByteCount { expected: dlc, found }));
        }
    };

    let mut payload = Vec::with_capacity(dlc);
    for (index, text) in data_fields.iter().enumerate() {
        let byte = u8::from_str_radix(text, 16).map_err(|_| {
            ParseError::new(ParseErrorKind::DataByte { index, text: text.to_string() })
        })?;
        payload.push(byte);
    }

    let label = match flag {
        None => Label::Normal,
        Some(f) if f.eq_ignore_ascii_case("R") => Label::Normal,
        Some(f) if f.eq_ignore_ascii_case("T") => Label::Attack,
        Some(f) => return Err(ParseError::new(ParseErrorKind::Flag(f.to_string()))),
    };

    LabeledFrame::new(timestamp, can_id as u16, payload, label).map_err(|e| {
        // new() re-checks what the field parsers above already enforced.
        ParseError::new(match e {
            FrameError::IdOutOfRange(id) => ParseErrorKind::IdOutOfRange(id),
            FrameError::PayloadTooLong(n) => ParseErrorKind::DlcOutOfRange(n as u32),
            FrameError::BadTimestamp(t) => ParseErrorKind::Timestamp(t.to_string()),
        })
    })
}

/// Canonical record form: 6-decimal timestamp, 4-digit lowercase hex id,
/// lowercase hex bytes, explicit flag.
pub fn format_frame_record(frame: &LabeledFrame) -> String {
    let mut s = format!("{:.6},{:04x},{}", frame.timestamp, frame.can_id, frame.dlc());
    for b in frame.payload() {
        s.push_str(&format!(",{b:02x}"));
    }
    s.push(',');
    s.push(frame.label.flag_char());
    s
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

/// Reads a whole log, skipping blank lines. Errors carry the line number.
pub fn read_log<R: BufRead>(reader: R) -> Result<Vec<LabeledFrame>, LogError> {
    let mut frames = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        frames.push(parse_frame_record(&line).map_err(|e| e.at_line(idx + 1))?);
    }
    Ok(frames)
}

pub fn read_log_file(path: &Path) -> Result<Vec<LabeledFrame>, LogError> {
    read_log(BufReader::new(File::open(path)?))
}

pub fn write_log<W: Write>(mut writer: W, frames: &[LabeledFrame]) -> io::Result<()> {
    for frame in frames {
        writeln!(writer, "{}", format_frame_record(frame))?;
    }
    Ok(())
}

pub fn write_log_file(path: &Path, frames: &[LabeledFrame]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_log(&mut w, frames)?;
    w.flush()
}

/// Attack mode injected by the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    #[serde(rename = "dos")]
    DoS,
    Fuzzy,
    SpoofRpm,
    SpoofGear,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] =
        [AttackKind::DoS, AttackKind::Fuzzy, AttackKind::SpoofRpm, AttackKind::SpoofGear];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::DoS => "dos",
            AttackKind::Fuzzy => "fuzzy",
            AttackKind::SpoofRpm => "spoof-rpm",
            AttackKind::SpoofGear => "spoof-gear",
        }
    }
}

/// Id targeted by the RPM spoofing template.
pub const SPOOF_RPM_ID: u16 = 0x316;
/// Id targeted by the gear spoofing template.
pub const SPOOF_GEAR_ID: u16 = 0x43F;

const SPOOF_RPM_TEMPLATE: [u8; 8] = [0xff, 0x7f, 0x00, 0x00, 0x00, 0x45, 0x00, 0x00];
const SPOOF_GEAR_TEMPLATE: [u8; 8] = [0x00, 0x00, 0x88, 0x04, 0x00, 0x00, 0x10, 0x00];

/// Payload process of one periodic normal id: one wrapping counter byte,
/// the rest seeded constants that occasionally jitter by one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadProcess {
    pub counter_byte: usize,
    pub jitter_prob: f64,
}

impl Default for PayloadProcess {
    fn default() -> Self {
        Self { counter_byte: 0, jitter_prob: 0.05 }
    }
}

/// One periodic transmitter on the synthetic bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalId {
    pub can_id: u16,
    pub period: f64,
    #[serde(default)]
    pub process: PayloadProcess,
}

impl NormalId {
    pub fn new(can_id: u16, period: f64) -> Self {
        Self { can_id, period, process: PayloadProcess::default() }
    }
}

/// Periodic id set resembling passenger-car control traffic. Includes the
/// two spoofing target ids so spoofed frames are only separable by payload.
pub fn default_normal_ids() -> Vec<NormalId> {
    [
        (0x130, 0.010),
        (0x131, 0.011),
        (0x140, 0.012),
        (0x18F, 0.014),
        (0x260, 0.015),
        (0x2C0, 0.018),
        (SPOOF_RPM_ID, 0.020),
        (0x350, 0.024),
        (SPOOF_GEAR_ID, 0.030),
        (0x545, 0.040),
    ]
    .into_iter()
    .map(|(id, period)| NormalId::new(id, period))
    .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub normal_ids: Vec<NormalId>,
    pub attack: AttackKind,
    /// Injections per second; derived from `attack_fraction_target` when absent.
    pub attack_rate: Option<f64>,
    pub duration: f64,
    pub attack_fraction_target: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(attack: AttackKind, duration: f64, attack_fraction_target: f64, seed: u64) -> Self {
        Self {
            normal_ids: default_normal_ids(),
            attack,
            attack_rate: None,
            duration,
            attack_fraction_target,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SyntheticConfigError> {
        if self.normal_ids.is_empty() {
            return Err(SyntheticConfigError::NoNormalIds);
        }
        for id in &self.normal_ids {
            if id.can_id > MAX_BASE_ID {
                return Err(SyntheticConfigError::BadNormalId(id.can_id));
            }
            if !(id.period > 0.0 && id.period.is_finite()) {
                return Err(SyntheticConfigError::BadPeriod(id.period));
            }
            if id.process.counter_byte >= MAX_DLC {
                return Err(SyntheticConfigError::BadCounterByte(id.process.counter_byte));
            }
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(SyntheticConfigError::BadDuration(self.duration));
        }
        if !(self.attack_fraction_target > 0.0 && self.attack_fraction_target < 1.0) {
            return Err(SyntheticConfigError::BadFraction(self.attack_fraction_target));
        }
        if let Some(rate) = self.attack_rate {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(SyntheticConfigError::BadRate(rate));
            }
        }
        Ok(())
    }

    /// Aggregate normal message rate in frames per second.
    pub fn normal_rate(&self) -> f64 {
        self.normal_ids.iter().map(|n| 1.0 / n.period).sum()
    }

    /// Injection rate that realizes `attack_fraction_target` against the
    /// periodic background, unless an explicit rate was configured.
    pub fn effective_attack_rate(&self) -> f64 {
        self.attack_rate.unwrap_or_else(|| {
            let f = self.attack_fraction_target;
            self.normal_rate() * f / (1.0 - f)
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SyntheticConfigError {
    #[error("at least one normal id is required")]
    NoNormalIds,
    #[error("normal id {0:#05x} exceeds the 11-bit base range")]
    BadNormalId(u16),
    #[error("period {0} must be positive and finite")]
    BadPeriod(f64),
    #[error("counter byte index {0} out of payload range")]
    BadCounterByte(usize),
    #[error("duration {0} must be positive and finite")]
    BadDuration(f64),
    #[error("attack fraction {0} must lie in (0,1)")]
    BadFraction(f64),
    #[error("attack rate {0} must be positive and finite")]
    BadRate(f64),
}

struct IdState {
    can_id: u16,
    period: f64,
    next_at: f64,
    payload: [u8; 8],
    counter_byte: usize,
    jitter_prob: f64,
    rng: ChaCha8Rng,
}

/// Deterministically synthesizes a time-ordered labeled log: periodic
/// normal traffic plus one injected attack stream.
pub fn generate_synthetic_log(
    cfg: &SyntheticConfig,
) -> Result<Vec<LabeledFrame>, SyntheticConfigError> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut states: Vec<IdState> = cfg
        .normal_ids
        .iter()
        .map(|n| {
            let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
            let mut payload = [0u8; 8];
            rng.fill(&mut payload);
            let next_at = rng.gen_range(0.0..n.period);
            IdState {
                can_id: n.can_id,
                period: n.period,
                next_at,
                payload,
                counter_byte: n.process.counter_byte,
                jitter_prob: n.process.jitter_prob,
                rng,
            }
        })
        .collect();

    let mut events: Vec<LabeledFrame> = Vec::new();
    for st in &mut states {
        let mut t = st.next_at;
        while t < cfg.duration {
            events.push(
                LabeledFrame::new(t, st.can_id, st.payload.to_vec(), Label::Normal)
                    .expect("validated id and payload"),
            );
            st.payload[st.counter_byte] = st.payload[st.counter_byte].wrapping_add(1);
            if st.rng.gen_bool(st.jitter_prob) {
                let mut idx = st.rng.gen_range(0..MAX_DLC);
                if idx == st.counter_byte {
                    idx = (idx + 1) % MAX_DLC;
                }
                let delta: u8 = if st.rng.gen_bool(0.5) { 1 } else { 0xff };
                st.payload[idx] = st.payload[idx].wrapping_add(delta);
            }
            t += st.period;
        }
    }

    let rate = cfg.effective_attack_rate();
    let mean_gap = 1.0 / rate;
    let mut attack_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut counter: u64 = 0;
    let mut t = attack_rng.gen_range(0.0..mean_gap);
    while t < cfg.duration {
        let frame = match cfg.attack {
            AttackKind::DoS => {
                LabeledFrame::new(t, 0x000, vec![0u8; 8], Label::Attack).expect("dos frame")
            }
            AttackKind::Fuzzy => {
                let id = attack_rng.gen_range(0..=MAX_BASE_ID);
                let mut payload = vec![0u8; 8];
                attack_rng.fill(payload.as_mut_slice());
                LabeledFrame::new(t, id, payload, Label::Attack).expect("fuzzy frame")
            }
            AttackKind::SpoofRpm | AttackKind::SpoofGear => {
                let (id, template, perturb_byte) = match cfg.attack {
                    AttackKind::SpoofRpm => (SPOOF_RPM_ID, SPOOF_RPM_TEMPLATE, 6),
                    _ => (SPOOF_GEAR_ID, SPOOF_GEAR_TEMPLATE, 7),
                };
                let mut payload = template;
                payload[perturb_byte] = payload[perturb_byte].wrapping_add((counter % 16) as u8);
                LabeledFrame::new(t, id, payload.to_vec(), Label::Attack).expect("spoof frame")
            }
        };
        events.push(frame);
        counter += 1;
        t += mean_gap * attack_rng.gen_range(0.8..1.2);
    }

    events.sort_by(|a, b| a.timestamp.partial_cmp(&b.timestamp).expect("finite timestamps"));
    Ok(events)
}

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("split ratios ({0}, {1}, {2}) must each lie in [0,1] and sum to 1")]
    BadRatios(f64, f64, f64),
}

/// Default 80:15:5 train/validation/test ratios.
pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.80, 0.15, 0.05);

/// Chronological-contiguous split; boundaries are cumulative floors so the
/// three parts are disjoint and covering.
pub fn split_dataset<T>(
    items: Vec<T>,
    ratios: (f64, f64, f64),
) -> Result<(Vec<T>, Vec<T>, Vec<T>), SplitError> {
    let (a, b, c) = ratios;
    let in_range = |r: f64| (0.0..=1.0).contains(&r);
    if !(in_range(a) && in_range(b) && in_range(c)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(SplitError::BadRatios(a, b, c));
    }
    let n = items.len();
    let train_end = ((n as f64) * a).floor() as usize;
    let val_end = ((n as f64) * (a + b)).floor() as usize;

    let mut items = items;
    let test = items.split_off(val_end.min(n));
    let val = items.split_off(train_end.min(val_end).min(n));
    Ok((items, val, test))
}
