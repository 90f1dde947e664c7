//! Live stream intake over WebSocket.
//!
//! Clients connect to `ws://HOST:PORT/inlet` and exchange JSON text frames
//! tagged by `type`:
//!
//! ```json
//! {"type":"hello","info":{...StreamInfo...}}
//! {"type":"sample_batch","stream_id":"gaze","timestamps":[...],"values":[[...],...]}
//! {"type":"clock_probe_request","probe_id":3,"t0":12.5}
//! {"type":"clock_probe_response","probe_id":3,"t0":12.5,"t1":13.0,"t2":13.0}
//! {"type":"bye","stream_id":"gaze"}
//! ```
//!
//! Numeric sample batches may instead be sent as binary frames (see
//! [`encode_binary_batch`]). The recorder sends probe requests stamped with
//! its own clock; clients answer with their receive and send times on their
//! clock. Each connection runs on its own thread and talks to a single
//! recorder thread through a queue; the recorder owns the session and,
//! optionally, an XDF file written incrementally.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tungstenite::protocol::frame::coding::CloseCode;
use tungstenite::protocol::CloseFrame;
use tungstenite::{Message, WebSocket};

use crate::stream::{
    ChannelFormat, ClockOffsetMeasurement, SampleValues, StreamInfo, TimedSamples,
};
use crate::xdf::{
    stream_footer_xml, RecordedStream, SessionRecording, XdfWriter, BOUNDARY_INTERVAL_S,
};

pub const INLET_PATH: &str = "/inlet";
pub const DEFAULT_PROBE_PERIOD_S: f64 = 5.0;

const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum InletError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: io::Error },
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("negative probe round trip: sent {t0}, received {t3}")]
    NegativeRoundTrip { t0: f64, t3: f64 },
    #[error("connection error: {0}")]
    Connection(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl From<tungstenite::Error> for InletError {
    fn from(e: tungstenite::Error) -> Self {
        InletError::Connection(e.to_string())
    }
}

/// Values of a sample batch, one inner array per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchValues {
    Numeric(Vec<Vec<f64>>),
    Text(Vec<Vec<String>>),
    /// Mixed JSON scalars, accepted for string streams (numbers are formatted).
    Mixed(Vec<Vec<serde_json::Value>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InletMessage {
    Hello {
        info: StreamInfo,
    },
    SampleBatch {
        stream_id: String,
        timestamps: Vec<f64>,
        values: BatchValues,
    },
    ClockProbeRequest {
        probe_id: u64,
        t0: f64,
    },
    ClockProbeResponse {
        probe_id: u64,
        t0: f64,
        t1: f64,
        t2: f64,
    },
    Bye {
        stream_id: String,
    },
}

impl InletMessage {
    /// Builds a batch message from rows of a stream.
    pub fn batch(stream_id: &str, samples: &TimedSamples) -> Self {
        let values = match &samples.values {
            SampleValues::Numeric(v) => BatchValues::Numeric(
                v.chunks(samples.channel_count)
                    .map(<[f64]>::to_vec)
                    .collect(),
            ),
            SampleValues::Text(v) => BatchValues::Text(
                v.chunks(samples.channel_count)
                    .map(<[String]>::to_vec)
                    .collect(),
            ),
        };
        InletMessage::SampleBatch {
            stream_id: stream_id.to_string(),
            timestamps: samples.timestamps.clone(),
            values,
        }
    }
}

/// A probe as answered by the remote side: `t0` on the requester's clock,
/// `t1` (receive) and `t2` (send) on the responder's clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResponse {
    pub probe_id: u64,
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
}

/// Two-way offset estimate `responder − requester`, stamped at the
/// requester's midpoint. Asymmetric latency biases it by half the asymmetry.
pub fn probe_offset(probe: &ProbeResponse, t3: f64) -> Result<ClockOffsetMeasurement, InletError> {
    if !(t3 >= probe.t0) {
        return Err(InletError::NegativeRoundTrip { t0: probe.t0, t3 });
    }
    Ok(ClockOffsetMeasurement {
        local_time: (probe.t0 + t3) / 2.0,
        measured_offset: ((probe.t1 - probe.t0) + (probe.t2 - t3)) / 2.0,
    })
}

/// Binary batch frame: `u32 id_len, id, u32 n, u32 channels, n × f64
/// timestamps, n·channels × f64 values`, all little-endian.
pub fn encode_binary_batch(stream_id: &str, samples: &TimedSamples) -> Option<Vec<u8>> {
    let SampleValues::Numeric(values) = &samples.values else {
        return None;
    };
    let mut out = Vec::with_capacity(12 + stream_id.len() + 8 * (samples.len() + values.len()));
    out.extend_from_slice(&(stream_id.len() as u32).to_le_bytes());
    out.extend_from_slice(stream_id.as_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(samples.channel_count as u32).to_le_bytes());
    for t in &samples.timestamps {
        out.extend_from_slice(&t.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Some(out)
}

pub fn decode_binary_batch(bytes: &[u8]) -> Result<(String, TimedSamples), InletError> {
    let bad = |what: &str| InletError::ProtocolViolation(format!("binary batch: {what}"));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], InletError> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated"))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let id_len = u32_at(take(4)?);
    let id = std::str::from_utf8(take(id_len)?)
        .map_err(|_| bad("stream id is not UTF-8"))?
        .to_string();
    let n = u32_at(take(4)?);
    let c = u32_at(take(4)?);
    let total = n
        .checked_mul(c)
        .and_then(|v| v.checked_add(n))
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| bad("size overflow"))?;
    let body = take(total)?;
    let f = |i: usize| f64::from_le_bytes(body[i * 8..i * 8 + 8].try_into().unwrap());
    let timestamps = (0..n).map(f).collect();
    let values = (n..n + n * c).map(f).collect();
    if take(1).is_ok() {
        return Err(bad("trailing bytes"));
    }
    Ok((
        id,
        TimedSamples {
            channel_count: c,
            timestamps,
            values: SampleValues::Numeric(values),
        },
    ))
}

/// Monotonic recorder clock in seconds.
#[derive(Debug, Clone, Copy)]
pub struct RecorderClock(Instant);

impl RecorderClock {
    pub fn start() -> Self {
        Self(Instant::now())
    }

    pub fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InletConfig {
    pub probe_period_s: f64,
    pub boundary_interval_s: f64,
    /// Incremental XDF output; `None` keeps the session in memory only.
    pub output: Option<PathBuf>,
}

impl Default for InletConfig {
    fn default() -> Self {
        Self {
            probe_period_s: DEFAULT_PROBE_PERIOD_S,
            boundary_interval_s: BOUNDARY_INTERVAL_S,
            output: None,
        }
    }
}

// ---------------------------------------------------------------------------
// recorder

type ConnId = u64;

enum Event {
    Register {
        conn: ConnId,
        info: StreamInfo,
        reply: Sender<Result<(), String>>,
    },
    Samples {
        conn: ConnId,
        stream_id: String,
        samples: TimedSamples,
    },
    Offset {
        conn: ConnId,
        measurement: ClockOffsetMeasurement,
    },
    Bye {
        conn: ConnId,
        stream_id: String,
    },
    Disconnected {
        conn: ConnId,
    },
    Stop,
}

struct StreamSlot {
    conn: ConnId,
    open: bool,
}

struct Recorder {
    session: SessionRecording,
    slots: Vec<StreamSlot>,
    /// Every probe of a connection, so streams announced later get the full history.
    conn_offsets: BTreeMap<ConnId, Vec<ClockOffsetMeasurement>>,
    writer: Option<XdfWriter<BufWriter<File>>>,
    io_error: Option<String>,
}

impl Recorder {
    fn write(&mut self, f: impl FnOnce(&mut XdfWriter<BufWriter<File>>) -> io::Result<()>) {
        if let Some(w) = &mut self.writer {
            if let Err(e) = f(w) {
                log::error!("XDF write failed, continuing in memory only: {e}");
                self.io_error = Some(e.to_string());
                self.writer = None;
            }
        }
    }

    fn index(&self, conn: ConnId, stream_id: &str) -> Option<usize> {
        self.session
            .streams
            .iter()
            .zip(&self.slots)
            .position(|(s, slot)| slot.conn == conn && slot.open && s.info.stream_id == stream_id)
    }

    fn finalize(&mut self, i: usize) {
        if !self.slots[i].open {
            return;
        }
        self.slots[i].open = false;
        let xml = stream_footer_xml(&self.session.streams[i].samples);
        self.session.streams[i].footer_xml = xml.clone();
        self.write(|w| w.footer(i as u32 + 1, &xml));
    }

    fn handle(&mut self, ev: Event) -> bool {
        match ev {
            Event::Register { conn, info, reply } => {
                let result = if self
                    .session
                    .streams
                    .iter()
                    .any(|s| s.info.stream_id == info.stream_id)
                {
                    Err(format!("stream {:?} is already registered", info.stream_id))
                } else {
                    let id = self.session.streams.len() as u32 + 1;
                    self.write(|w| w.stream_header(id, &info));
                    log::info!(
                        "stream {} ({}) registered",
                        info.stream_id,
                        info.kind.as_str()
                    );
                    let mut rs = RecordedStream::new(info);
                    rs.clock_offsets = self.conn_offsets.get(&conn).cloned().unwrap_or_default();
                    for m in &rs.clock_offsets {
                        self.write(|w| w.clock_offset(id, m));
                    }
                    self.session.streams.push(rs);
                    self.slots.push(StreamSlot { conn, open: true });
                    Ok(())
                };
                let _ = reply.send(result);
            }
            Event::Samples {
                conn,
                stream_id,
                samples,
            } => {
                if let Some(i) = self.index(conn, &stream_id) {
                    let rs = &mut self.session.streams[i];
                    let start = rs.samples.len();
                    rs.samples.timestamps.extend_from_slice(&samples.timestamps);
                    match (&mut rs.samples.values, samples.values) {
                        (SampleValues::Numeric(a), SampleValues::Numeric(b)) => a.extend(b),
                        (SampleValues::Text(a), SampleValues::Text(b)) => a.extend(b),
                        _ => unreachable!("batches are converted to the stream format on intake"),
                    }
                    let end = rs.samples.len();
                    let (info, data) = (rs.info.clone(), rs.samples.clone());
                    self.write(|w| w.samples(i as u32 + 1, &info, &data, start..end));
                }
            }
            Event::Offset { conn, measurement } => {
                self.conn_offsets.entry(conn).or_default().push(measurement);
                for i in 0..self.slots.len() {
                    if self.slots[i].conn == conn && self.slots[i].open {
                        self.session.streams[i].clock_offsets.push(measurement);
                        self.write(|w| w.clock_offset(i as u32 + 1, &measurement));
                    }
                }
            }
            Event::Bye { conn, stream_id } => {
                if let Some(i) = self.index(conn, &stream_id) {
                    self.finalize(i);
                }
            }
            Event::Disconnected { conn } => {
                for i in 0..self.slots.len() {
                    if self.slots[i].conn == conn {
                        self.finalize(i);
                    }
                }
            }
            Event::Stop => return false,
        }
        true
    }

    fn run(mut self, rx: Receiver<Event>, boundary_every: Duration) -> SessionRecording {
        let mut last_boundary = Instant::now();
        loop {
            match rx.recv_timeout(POLL * 4) {
                Ok(ev) => {
                    if !self.handle(ev) {
                        break;
                    }
                }
                Err(mpsc::RecvTimeoutError::Timeout) => {}
                Err(mpsc::RecvTimeoutError::Disconnected) => break,
            }
            if last_boundary.elapsed() >= boundary_every {
                last_boundary = Instant::now();
                self.write(|w| w.boundary().and_then(|_| w.flush()));
            }
        }
        // drain what the connections managed to queue before stopping
        while let Ok(ev) = rx.try_recv() {
            self.handle(ev);
        }
        for i in 0..self.slots.len() {
            self.finalize(i);
        }
        self.write(|w| w.boundary().and_then(|_| w.flush()));
        self.session
    }
}

// ---------------------------------------------------------------------------
// connections

struct Connection {
    id: ConnId,
    ws: WebSocket<TcpStream>,
    events: Sender<Event>,
    clock: RecorderClock,
    streams: BTreeMap<String, StreamInfo>,
    pending: BTreeMap<u64, f64>,
    answered: BTreeSet<u64>,
    next_probe: u64,
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut))
}

fn violation(msg: impl Into<String>) -> InletError {
    InletError::ProtocolViolation(msg.into())
}

/// Converts an incoming batch to the registered stream's layout.
fn batch_samples(
    info: &StreamInfo,
    timestamps: Vec<f64>,
    values: BatchValues,
) -> Result<TimedSamples, InletError> {
    let c = info.channel_count;
    let rows = match &values {
        BatchValues::Numeric(v) => v.len(),
        BatchValues::Text(v) => v.len(),
        BatchValues::Mixed(v) => v.len(),
    };
    if rows != timestamps.len() {
        return Err(violation(format!(
            "{}: {} timestamps for {rows} samples",
            info.stream_id,
            timestamps.len()
        )));
    }
    if timestamps.iter().any(|t| !t.is_finite()) {
        return Err(violation(format!(
            "{}: non-finite timestamp",
            info.stream_id
        )));
    }
    let width_ok = |w: usize| {
        if w == c {
            Ok(())
        } else {
            Err(violation(format!(
                "{}: sample of {w} values, stream has {c} channels",
                info.stream_id
            )))
        }
    };
    let values = match (info.format(), values) {
        (ChannelFormat::String, BatchValues::Text(v)) => {
            let mut out = Vec::with_capacity(rows * c);
            for row in v {
                width_ok(row.len())?;
                out.extend(row);
            }
            SampleValues::Text(out)
        }
        (ChannelFormat::String, BatchValues::Mixed(v)) => {
            let mut out = Vec::with_capacity(rows * c);
            for row in v {
                width_ok(row.len())?;
                for x in row {
                    out.push(match x {
                        serde_json::Value::String(s) => s,
                        serde_json::Value::Number(n) => n.to_string(),
                        other => {
                            return Err(violation(format!(
                                "{}: unsupported value {other}",
                                info.stream_id
                            )))
                        }
                    });
                }
            }
            SampleValues::Text(out)
        }
        (ChannelFormat::String, BatchValues::Numeric(v))
            if v.iter().all(Vec::is_empty) && c == 0 =>
        {
            SampleValues::Text(Vec::new())
        }
        (ChannelFormat::String, BatchValues::Numeric(v)) => {
            let mut out = Vec::with_capacity(rows * c);
            for row in v {
                width_ok(row.len())?;
                out.extend(row.iter().map(|x| {
                    serde_json::Number::from_f64(*x)
                        .map_or_else(|| x.to_string(), |n| n.to_string())
                }));
            }
            SampleValues::Text(out)
        }
        (format, BatchValues::Numeric(v)) => {
            let mut out = Vec::with_capacity(rows * c);
            for row in v {
                width_ok(row.len())?;
                if format == ChannelFormat::Float32 {
                    out.extend(row.iter().map(|x| *x as f32 as f64));
                } else {
                    out.extend(row);
                }
            }
            SampleValues::Numeric(out)
        }
        (_, BatchValues::Text(v)) if v.is_empty() => SampleValues::Numeric(Vec::new()),
        _ => {
            return Err(violation(format!(
                "{}: text values for a numeric stream",
                info.stream_id
            )))
        }
    };
    Ok(TimedSamples {
        channel_count: c,
        timestamps,
        values,
    })
}

impl Connection {
    fn send(&mut self, msg: &InletMessage) -> Result<(), InletError> {
        let text = serde_json::to_string(msg).expect("messages serialize");
        self.ws.send(Message::text(text))?;
        Ok(())
    }

    fn probe(&mut self) -> Result<(), InletError> {
        let probe_id = self.next_probe;
        self.next_probe += 1;
        let t0 = self.clock.now();
        self.pending.insert(probe_id, t0);
        self.send(&InletMessage::ClockProbeRequest { probe_id, t0 })
    }

    fn on_message(&mut self, msg: InletMessage) -> Result<(), InletError> {
        match msg {
            InletMessage::Hello { info } => {
                info.check().map_err(violation)?;
                if self.streams.contains_key(&info.stream_id) {
                    return Err(violation(format!("duplicate hello for {}", info.stream_id)));
                }
                let (reply, answer) = mpsc::channel();
                self.events
                    .send(Event::Register {
                        conn: self.id,
                        info: info.clone(),
                        reply,
                    })
                    .map_err(|_| InletError::Connection("recorder stopped".into()))?;
                answer
                    .recv()
                    .map_err(|_| InletError::Connection("recorder stopped".into()))?
                    .map_err(violation)?;
                self.streams.insert(info.stream_id.clone(), info);
            }
            InletMessage::SampleBatch {
                stream_id,
                timestamps,
                values,
            } => {
                let info = self.streams.get(&stream_id).ok_or_else(|| {
                    violation(format!("sample batch for {stream_id} before hello"))
                })?;
                let samples = batch_samples(info, timestamps, values)?;
                self.forward(stream_id, samples)?;
            }
            InletMessage::ClockProbeResponse {
                probe_id,
                t0,
                t1,
                t2,
            } => {
                let t3 = self.clock.now();
                let Some(sent) = self.pending.remove(&probe_id) else {
                    let what = if self.answered.contains(&probe_id) {
                        "duplicate"
                    } else {
                        "unknown"
                    };
                    return Err(violation(format!("{what} probe id {probe_id}")));
                };
                self.answered.insert(probe_id);
                if sent.to_bits() != t0.to_bits() {
                    return Err(violation(format!("probe {probe_id}: t0 altered")));
                }
                let m = probe_offset(
                    &ProbeResponse {
                        probe_id,
                        t0,
                        t1,
                        t2,
                    },
                    t3,
                )?;
                if !m.measured_offset.is_finite() {
                    return Err(violation(format!("probe {probe_id}: non-finite times")));
                }
                let _ = self.events.send(Event::Offset {
                    conn: self.id,
                    measurement: m.reversed(),
                });
            }
            InletMessage::ClockProbeRequest { .. } => {
                return Err(violation("clients do not send probe requests"));
            }
            InletMessage::Bye { stream_id } => {
                if self.streams.remove(&stream_id).is_none() {
                    return Err(violation(format!("bye for unknown stream {stream_id}")));
                }
                let _ = self.events.send(Event::Bye {
                    conn: self.id,
                    stream_id,
                });
            }
        }
        Ok(())
    }

    fn forward(&mut self, stream_id: String, samples: TimedSamples) -> Result<(), InletError> {
        self.events
            .send(Event::Samples {
                conn: self.id,
                stream_id,
                samples,
            })
            .map_err(|_| InletError::Connection("recorder stopped".into()))
    }

    fn on_binary(&mut self, bytes: &[u8]) -> Result<(), InletError> {
        let (stream_id, samples) = decode_binary_batch(bytes)?;
        let info = self
            .streams
            .get(&stream_id)
            .ok_or_else(|| violation(format!("sample batch for {stream_id} before hello")))?;
        if !info.format().is_numeric() {
            return Err(violation(format!(
                "{stream_id}: binary batch for a string stream"
            )));
        }
        if samples.channel_count != info.channel_count {
            return Err(violation(format!(
                "{stream_id}: batch of {} channels, stream has {}",
                samples.channel_count, info.channel_count
            )));
        }
        let SampleValues::Numeric(mut v) = samples.values else {
            unreachable!()
        };
        if info.format() == ChannelFormat::Float32 {
            v.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        let samples = TimedSamples {
            values: SampleValues::Numeric(v),
            ..samples
        };
        if samples.timestamps.iter().any(|t| !t.is_finite()) {
            return Err(violation(format!("{stream_id}: non-finite timestamp")));
        }
        self.forward(stream_id, samples)
    }

    fn run(mut self, stop: Arc<AtomicBool>, probe_period: Duration) {
        let mut next_probe_at = Instant::now();
        let outcome: Result<(), InletError> = (|| loop {
            if stop.load(Ordering::SeqCst) {
                let _ = self.ws.close(None);
                let _ = self.ws.flush();
                return Ok(());
            }
            if Instant::now() >= next_probe_at {
                next_probe_at += probe_period;
                self.probe()?;
            }
            match self.ws.read() {
                Ok(Message::Text(t)) => {
                    let msg: InletMessage = serde_json::from_str(t.as_str())
                        .map_err(|e| violation(format!("malformed message: {e}")))?;
                    self.on_message(msg)?;
                }
                Ok(Message::Binary(b)) => self.on_binary(&b)?,
                Ok(Message::Close(_)) => return Ok(()),
                Ok(_) => {}
                Err(e) if is_timeout(&e) => {}
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => {
                    return Ok(())
                }
                Err(e) => return Err(e.into()),
            }
        })();
        match outcome {
            Err(InletError::ProtocolViolation(reason)) => {
                log::warn!("connection {}: protocol violation: {reason}", self.id);
                let frame = CloseFrame {
                    code: CloseCode::Policy,
                    reason: reason.chars().take(100).collect::<String>().into(),
                };
                let _ = self.ws.close(Some(frame));
                let _ = self.ws.flush();
            }
            Err(e) => log::warn!("connection {}: {e}", self.id),
            Ok(()) => log::debug!("connection {} closed", self.id),
        }
        let _ = self.events.send(Event::Disconnected { conn: self.id });
    }
}

// ---------------------------------------------------------------------------
// service

struct Running {
    accept: JoinHandle<Vec<JoinHandle<()>>>,
    recorder: JoinHandle<SessionRecording>,
    events: Sender<Event>,
}

/// Handle to a running inlet. [`InletHandle::shutdown`] is blocking and may be
/// called any number of times; every call returns the same recording.
pub struct InletHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    running: Mutex<Option<Running>>,
    result: Mutex<Option<Result<SessionRecording, String>>>,
}

impl InletHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("ws://{}{}", self.addr, INLET_PATH)
    }

    /// Flag that stops the service when set, e.g. from a signal handler.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    /// Blocks until the stop flag is set.
    pub fn wait(&self) {
        while !self.stop.load(Ordering::SeqCst) {
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    pub fn shutdown(&self) -> Result<SessionRecording, InletError> {
        let mut result = self.result.lock().unwrap();
        if result.is_none() {
            self.stop.store(true, Ordering::SeqCst);
            let running = self
                .running
                .lock()
                .unwrap()
                .take()
                .expect("running until first shutdown");
            let conns = running.accept.join().unwrap_or_default();
            for c in conns {
                let _ = c.join();
            }
            let _ = running.events.send(Event::Stop);
            *result = Some(
                running
                    .recorder
                    .join()
                    .map_err(|_| "recorder thread panicked".to_string()),
            );
        }
        result
            .as_ref()
            .unwrap()
            .clone()
            .map_err(InletError::Connection)
    }
}

impl Drop for InletHandle {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

#[allow(clippy::result_large_err)] // signature fixed by tungstenite
fn check_path(req: &Request, resp: Response) -> Result<Response, ErrorResponse> {
    if req.uri().path() == INLET_PATH {
        Ok(resp)
    } else {
        let mut err = ErrorResponse::new(Some(format!("unknown endpoint {}", req.uri().path())));
        *err.status_mut() = tungstenite::http::StatusCode::NOT_FOUND;
        Err(err)
    }
}

/// Starts accepting connections on `addr` (use port 0 for an ephemeral port).
pub fn serve_inlet(addr: &str, config: InletConfig) -> Result<InletHandle, InletError> {
    if !(config.probe_period_s > 0.0 && config.boundary_interval_s > 0.0) {
        return Err(InletError::Connection(
            "probe and boundary periods must be positive".into(),
        ));
    }
    let bind_err = |source| InletError::BindFailure {
        addr: addr.to_string(),
        source,
    };
    let listener = TcpListener::bind(addr).map_err(bind_err)?;
    listener.set_nonblocking(true).map_err(bind_err)?;
    let local = listener.local_addr().map_err(bind_err)?;

    let writer = match &config.output {
        Some(path) => Some(XdfWriter::new(
            BufWriter::new(File::create(path)?),
            &SessionRecording::default().file_header_xml,
        )?),
        None => None,
    };
    let recorder = Recorder {
        session: SessionRecording::default(),
        slots: Vec::new(),
        conn_offsets: BTreeMap::new(),
        writer,
        io_error: None,
    };
    let (tx, rx) = mpsc::channel();
    let boundary_every = Duration::from_secs_f64(config.boundary_interval_s);
    let recorder = std::thread::Builder::new()
        .name("inlet-recorder".into())
        .spawn(move || recorder.run(rx, boundary_every))?;

    let stop = Arc::new(AtomicBool::new(false));
    let clock = RecorderClock::start();
    let probe_period = Duration::from_secs_f64(config.probe_period_s);
    let accept = {
        let stop = stop.clone();
        let events = tx.clone();
        std::thread::Builder::new()
            .name("inlet-accept".into())
            .spawn(move || {
                let mut conns = Vec::new();
                let mut next_id: ConnId = 0;
                while !stop.load(Ordering::SeqCst) {
                    match listener.accept() {
                        Ok((stream, peer)) => {
                            next_id += 1;
                            let id = next_id;
                            let (events, stop) = (events.clone(), stop.clone());
                            conns.push(std::thread::spawn(move || {
                                let _ = stream.set_nonblocking(false);
                                let _ = stream.set_nodelay(true);
                                let _ = stream.set_read_timeout(Some(Duration::from_secs(5)));
                                let ws = match tungstenite::accept_hdr(stream, check_path) {
                                    Ok(ws) => ws,
                                    Err(e) => {
                                        log::warn!("handshake with {peer} failed: {e}");
                                        return;
                                    }
                                };
                                let _ = ws.get_ref().set_read_timeout(Some(POLL));
                                log::info!("connection {id} from {peer}");
                                let conn = Connection {
                                    id,
                                    ws,
                                    events,
                                    clock,
                                    streams: BTreeMap::new(),
                                    pending: BTreeMap::new(),
                                    answered: BTreeSet::new(),
                                    next_probe: 0,
                                };
                                conn.run(stop, probe_period);
                            }));
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(10))
                        }
                        Err(e) => {
                            log::warn!("accept failed: {e}");
                            std::thread::sleep(Duration::from_millis(10));
                        }
                    }
                }
                conns
            })?
    };
    Ok(InletHandle {
        addr: local,
        stop,
        running: Mutex::new(Some(Running {
            accept,
            recorder,
            events: tx,
        })),
        result: Mutex::new(None),
    })
}

// ---------------------------------------------------------------------------
// client

/// Blocking client used by device adapters and tests. Probe requests are
/// answered whenever the client sends or pumps.
pub struct InletClient {
    ws: WebSocket<TcpStream>,
    clock: Box<dyn Fn() -> f64 + Send>,
    /// Probe ids to leave unanswered (simulates dropped responses).
    pub drop_probes: BTreeSet<u64>,
    /// Measurements the client would see if it were the requester; unused by
    /// the recorder but handy for diagnostics.
    pub probes_answered: usize,
    closed: Option<String>,
}

impl InletClient {
    /// Connects to `addr` (host:port); `clock` gives the client's local time.
    pub fn connect(
        addr: &str,
        clock: impl Fn() -> f64 + Send + 'static,
    ) -> Result<Self, InletError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let (ws, _) = tungstenite::client(format!("ws://{addr}{INLET_PATH}"), stream)
            .map_err(|e| InletError::Connection(e.to_string()))?;
        ws.get_ref()
            .set_read_timeout(Some(Duration::from_millis(1)))?;
        Ok(Self {
            ws,
            clock: Box::new(clock),
            drop_probes: BTreeSet::new(),
            probes_answered: 0,
            closed: None,
        })
    }

    /// Close reason sent by the server, if it closed the connection.
    pub fn close_reason(&self) -> Option<&str> {
        self.closed.as_deref()
    }

    pub fn send(&mut self, msg: &InletMessage) -> Result<(), InletError> {
        self.pump_once()?;
        self.ws.send(Message::text(
            serde_json::to_string(msg).expect("messages serialize"),
        ))?;
        Ok(())
    }

    pub fn send_raw_text(&mut self, text: &str) -> Result<(), InletError> {
        self.ws.send(Message::text(text.to_string()))?;
        Ok(())
    }

    pub fn hello(&mut self, info: &StreamInfo) -> Result<(), InletError> {
        self.send(&InletMessage::Hello { info: info.clone() })
    }

    pub fn send_samples(
        &mut self,
        stream_id: &str,
        samples: &TimedSamples,
    ) -> Result<(), InletError> {
        self.send(&InletMessage::batch(stream_id, samples))
    }

    pub fn send_samples_binary(
        &mut self,
        stream_id: &str,
        samples: &TimedSamples,
    ) -> Result<(), InletError> {
        self.pump_once()?;
        let bytes = encode_binary_batch(stream_id, samples).ok_or_else(|| {
            InletError::ProtocolViolation("binary batches carry numeric values only".into())
        })?;
        self.ws.send(Message::binary(bytes))?;
        Ok(())
    }

    pub fn bye(&mut self, stream_id: &str) -> Result<(), InletError> {
        self.send(&InletMessage::Bye {
            stream_id: stream_id.to_string(),
        })
    }

    fn pump_once(&mut self) -> Result<bool, InletError> {
        if self.closed.is_some() {
            return Err(InletError::Connection(format!(
                "closed by server: {}",
                self.closed.as_deref().unwrap()
            )));
        }
        match self.ws.read() {
            Ok(Message::Text(t)) => {
                if let Ok(InletMessage::ClockProbeRequest { probe_id, t0 }) =
                    serde_json::from_str(t.as_str())
                {
                    if self.drop_probes.contains(&probe_id) {
                        return Ok(true);
                    }
                    let t1 = (self.clock)();
                    let t2 = (self.clock)();
                    let reply = InletMessage::ClockProbeResponse {
                        probe_id,
                        t0,
                        t1,
                        t2,
                    };
                    self.ws.send(Message::text(
                        serde_json::to_string(&reply).expect("messages serialize"),
                    ))?;
                    self.probes_answered += 1;
                }
                Ok(true)
            }
            Ok(Message::Close(frame)) => {
                self.closed = Some(frame.map(|f| f.reason.to_string()).unwrap_or_default());
                Ok(false)
            }
            Ok(_) => Ok(true),
            Err(e) if is_timeout(&e) => Ok(false),
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => {
                self.closed.get_or_insert_with(String::new);
                Ok(false)
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Answers probes for `duration`.
    pub fn pump(&mut self, duration: Duration) -> Result<(), InletError> {
        let until = Instant::now() + duration;
        while Instant::now() < until {
            match self.pump_once() {
                Ok(_) => {}
                Err(_) if self.closed.is_some() => return Ok(()),
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// Sends a close frame and waits briefly for the server's acknowledgement.
    pub fn close(mut self) -> Result<(), InletError> {
        let _ = self.ws.close(None);
        let until = Instant::now() + Duration::from_secs(2);
        while Instant::now() < until {
            match self.ws.read() {
                Err(e) if is_timeout(&e) => {}
                Err(_) => break,
                Ok(_) => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(t0: f64, t1: f64, t2: f64) -> ProbeResponse {
        ProbeResponse {
            probe_id: 0,
            t0,
            t1,
            t2,
        }
    }

    #[test]
    fn probe_offset_examples() {
        let m = probe_offset(&resp(1.0, 1.0, 1.0), 1.0).unwrap();
        assert_eq!((m.local_time, m.measured_offset), (1.0, 0.0));
        // symmetric 10 ms each way, responder 0.5 s ahead
        let m = probe_offset(&resp(10.0, 10.51, 10.51), 10.02).unwrap();
        assert!((m.measured_offset - 0.5).abs() < 1e-12);
        assert!((m.local_time - 10.01).abs() < 1e-12);
        // 5 ms out, 15 ms back
        let m = probe_offset(&resp(10.0, 10.505, 10.505), 10.02).unwrap();
        assert!((m.measured_offset - 0.495).abs() < 1e-12);
        let m = probe_offset(&resp(10.0, 10.515, 10.515), 10.02).unwrap();
        assert!((m.measured_offset - 0.505).abs() < 1e-12);
        assert!(matches!(
            probe_offset(&resp(10.0, 0.0, 0.0), 9.0),
            Err(InletError::NegativeRoundTrip { .. })
        ));
    }

    #[test]
    fn message_json_uses_documented_names() {
        let m = InletMessage::ClockProbeResponse {
            probe_id: 7,
            t0: 1.0,
            t1: 2.0,
            t2: 3.0,
        };
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["type"], "clock_probe_response");
        for k in ["probe_id", "t0", "t1", "t2"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        let text = r#"{"type":"sample_batch","stream_id":"rating","timestamps":[1.5],"values":[["s1",4]]}"#;
        let m: InletMessage = serde_json::from_str(text).unwrap();
        let InletMessage::SampleBatch { values, .. } = m else {
            panic!()
        };
        let info = StreamInfo::new(
            "rating",
            crate::stream::StreamKind::Rating,
            &["sentence_id", "agreement"],
            0.0,
        );
        let s = batch_samples(&info, vec![1.5], values).unwrap();
        assert_eq!(s.text_row(0).unwrap(), ["s1", "4"]);
    }

    #[test]
    fn binary_batch_round_trip_and_truncation() {
        let s = TimedSamples {
            channel_count: 2,
            timestamps: vec![0.5, 0.6],
            values: SampleValues::Numeric(vec![1.0, 2.0, 3.0, 4.0]),
        };
        let bytes = encode_binary_batch("eeg", &s).unwrap();
        let (id, back) = decode_binary_batch(&bytes).unwrap();
        assert_eq!(id, "eeg");
        assert_eq!(back, s);
        for cut in 0..bytes.len() {
            assert!(decode_binary_batch(&bytes[..cut]).is_err());
        }
        let mut huge = bytes.clone();
        huge[7..11].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_binary_batch(&huge).is_err());
    }
}
