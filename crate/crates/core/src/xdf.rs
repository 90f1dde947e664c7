//! Reader and writer for the XDF chunked container.
//!
//! Layout: the magic `XDF:` followed by chunks of the form
//! `[length-of-length: 1 byte (1, 4 or 8)][length][tag: u16][content]`, where
//! `length` counts the tag and content bytes. All numbers are little-endian.
//!
//! The writer is strict: a session that violates an invariant is refused. The
//! reader is lenient: unknown tags and stray chunks become warnings.

use std::collections::{HashMap, HashSet};
use std::io::{self, Write};

use thiserror::Error;

use crate::stream::{
    ChannelFormat, ClockOffsetMeasurement, SampleValues, StreamInfo, StreamKind, TimedSamples,
};

pub const MAGIC: &[u8; 4] = b"XDF:";

/// Payload of Boundary chunks; lets readers resynchronize in damaged files.
pub const BOUNDARY_UUID: [u8; 16] = [
    0x43, 0xA5, 0x46, 0xDC, 0xCB, 0xF5, 0x41, 0x0F, 0xB3, 0x0E, 0xD5, 0x46, 0x73, 0x83, 0xCB, 0xE4,
];

pub const DEFAULT_FILE_HEADER: &str = r#"<?xml version="1.0"?><info><version>1.0</version></info>"#;

/// Seconds of data between Boundary chunks written by [`encode_session`].
pub const BOUNDARY_INTERVAL_S: f64 = 10.0;

#[derive(Debug, Error)]
pub enum XdfError {
    #[error("bad magic: input does not start with \"XDF:\"")]
    BadMagic,
    #[error("truncated chunk at byte {offset}: declared length runs past end of input")]
    TruncatedChunk { offset: usize },
    #[error("invalid length-of-length marker {marker} at byte {offset}")]
    InvalidLengthMarker { offset: usize, marker: u8 },
    #[error("malformed chunk at byte {offset}: {reason}")]
    MalformedChunk { offset: usize, reason: String },
    #[error("malformed header XML: {0}")]
    MalformedHeaderXml(String),
    #[error("session invariant violated: {0}")]
    InvariantViolation(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ChunkTag {
    FileHeader = 1,
    StreamHeader = 2,
    Samples = 3,
    ClockOffset = 4,
    Boundary = 5,
    StreamFooter = 6,
}

impl ChunkTag {
    pub fn from_u16(v: u16) -> Option<Self> {
        Some(match v {
            1 => ChunkTag::FileHeader,
            2 => ChunkTag::StreamHeader,
            3 => ChunkTag::Samples,
            4 => ChunkTag::ClockOffset,
            5 => ChunkTag::Boundary,
            6 => ChunkTag::StreamFooter,
            _ => return None,
        })
    }

    fn has_stream_id(self) -> bool {
        matches!(
            self,
            ChunkTag::StreamHeader
                | ChunkTag::Samples
                | ChunkTag::ClockOffset
                | ChunkTag::StreamFooter
        )
    }
}

/// One raw chunk. `tag` keeps the on-disk value so unknown tags survive inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk<'a> {
    pub offset: usize,
    pub tag: u16,
    pub stream_id: Option<u32>,
    pub payload: &'a [u8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedStream {
    pub info: StreamInfo,
    pub samples: TimedSamples,
    pub clock_offsets: Vec<ClockOffsetMeasurement>,
    /// Stored verbatim; empty when the stream has no footer.
    pub footer_xml: String,
}

impl RecordedStream {
    pub fn new(info: StreamInfo) -> Self {
        let samples = TimedSamples::empty(&info);
        Self {
            info,
            samples,
            clock_offsets: Vec::new(),
            footer_xml: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecording {
    pub file_header_xml: String,
    pub streams: Vec<RecordedStream>,
}

impl Default for SessionRecording {
    fn default() -> Self {
        Self {
            file_header_xml: DEFAULT_FILE_HEADER.to_string(),
            streams: Vec::new(),
        }
    }
}

impl SessionRecording {
    pub fn stream(&self, stream_id: &str) -> Option<&RecordedStream> {
        self.streams.iter().find(|s| s.info.stream_id == stream_id)
    }

    /// First stream of the given kind, in declaration order.
    pub fn stream_of_kind(&self, kind: StreamKind) -> Option<&RecordedStream> {
        self.streams.iter().find(|s| s.info.kind == kind)
    }

    /// Checks everything the writer relies on.
    pub fn check(&self) -> Result<(), XdfError> {
        let bad = |m: String| Err(XdfError::InvariantViolation(m));
        let mut seen = HashSet::new();
        for s in &self.streams {
            s.info.check().map_err(XdfError::InvariantViolation)?;
            if !seen.insert(s.info.stream_id.as_str()) {
                return bad(format!("duplicate stream id {}", s.info.stream_id));
            }
            let id = &s.info.stream_id;
            if s.samples.channel_count != s.info.channel_count {
                return bad(format!(
                    "stream {id}: samples carry {} channels",
                    s.samples.channel_count
                ));
            }
            let rows = s.samples.timestamps.len();
            if s.samples.values.len() != rows * s.info.channel_count {
                return bad(format!(
                    "stream {id}: {} values for {rows} rows",
                    s.samples.values.len()
                ));
            }
            if s.samples.timestamps.iter().any(|t| !t.is_finite()) {
                return bad(format!("stream {id}: non-finite timestamp"));
            }
            match (&s.samples.values, s.info.format()) {
                (SampleValues::Numeric(v), ChannelFormat::Float32) => {
                    if let Some(x) = v.iter().find(|x| !x.is_nan() && (**x as f32) as f64 != **x) {
                        return bad(format!(
                            "stream {id}: value {x} is not representable as float32"
                        ));
                    }
                }
                (SampleValues::Numeric(_), ChannelFormat::Double64) => {}
                (SampleValues::Text(_), ChannelFormat::String) => {}
                _ => {
                    return bad(format!(
                        "stream {id}: sample values do not match channel format"
                    ))
                }
            }
            if s.clock_offsets
                .iter()
                .any(|m| !m.local_time.is_finite() || !m.measured_offset.is_finite())
            {
                return bad(format!("stream {id}: non-finite clock offset"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// writing

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Stream header XML for `info`. Parsing it with [`parse_stream_header`]
/// yields `info` again.
pub fn stream_header_xml(info: &StreamInfo) -> String {
    let mut x = String::from(r#"<?xml version="1.0"?><info>"#);
    x += &format!("<name>{}</name>", xml_escape(&info.stream_id));
    x += &format!("<type>{}</type>", info.kind.as_str());
    x += &format!("<channel_count>{}</channel_count>", info.channel_count);
    x += &format!("<nominal_srate>{}</nominal_srate>", info.nominal_rate_hz);
    x += &format!(
        "<channel_format>{}</channel_format>",
        info.format().as_str()
    );
    x += &format!("<source_id>{}</source_id>", xml_escape(&info.stream_id));
    x += "<desc><channels>";
    for l in &info.channel_labels {
        x += &format!("<channel><label>{}</label></channel>", xml_escape(l));
    }
    x += "</channels><metadata>";
    for (k, v) in &info.source_metadata {
        x += &format!(
            r#"<entry key="{}">{}</entry>"#,
            xml_escape(k),
            xml_escape(v)
        );
    }
    x += "</metadata></desc></info>";
    x
}

/// Footer XML summarizing a finished stream.
pub fn stream_footer_xml(samples: &TimedSamples) -> String {
    let first = samples.timestamps.first().copied().unwrap_or(0.0);
    let last = samples.timestamps.last().copied().unwrap_or(0.0);
    format!(
        r#"<?xml version="1.0"?><info><first_timestamp>{first}</first_timestamp><last_timestamp>{last}</last_timestamp><sample_count>{}</sample_count></info>"#,
        samples.len()
    )
}

fn put_varlen(buf: &mut Vec<u8>, n: u64) {
    if n <= u8::MAX as u64 {
        buf.push(1);
        buf.push(n as u8);
    } else if n <= u32::MAX as u64 {
        buf.push(4);
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    } else {
        buf.push(8);
        buf.extend_from_slice(&n.to_le_bytes());
    }
}

/// Incremental chunk writer; [`encode_session`] and the live recorder share it.
pub struct XdfWriter<W: Write> {
    out: W,
    scratch: Vec<u8>,
}

impl<W: Write> XdfWriter<W> {
    /// Writes the magic and the file header chunk.
    pub fn new(mut out: W, file_header_xml: &str) -> io::Result<Self> {
        out.write_all(MAGIC)?;
        let mut w = Self {
            out,
            scratch: Vec::new(),
        };
        w.chunk(ChunkTag::FileHeader, None, file_header_xml.as_bytes())?;
        Ok(w)
    }

    fn chunk(&mut self, tag: ChunkTag, stream: Option<u32>, content: &[u8]) -> io::Result<()> {
        let mut body_len = 2 + content.len() as u64;
        if stream.is_some() {
            body_len += 4;
        }
        let mut head = Vec::with_capacity(16);
        put_varlen(&mut head, body_len);
        head.extend_from_slice(&(tag as u16).to_le_bytes());
        if let Some(id) = stream {
            head.extend_from_slice(&id.to_le_bytes());
        }
        self.out.write_all(&head)?;
        self.out.write_all(content)
    }

    pub fn stream_header(&mut self, xdf_id: u32, info: &StreamInfo) -> io::Result<()> {
        self.chunk(
            ChunkTag::StreamHeader,
            Some(xdf_id),
            stream_header_xml(info).as_bytes(),
        )
    }

    /// Writes rows `range` of `samples`. A timestamp is omitted when it equals
    /// the previous one plus the nominal sample interval bit for bit, so the
    /// reader reconstructs it exactly.
    pub fn samples(
        &mut self,
        xdf_id: u32,
        info: &StreamInfo,
        samples: &TimedSamples,
        range: std::ops::Range<usize>,
    ) -> io::Result<()> {
        let mut buf = std::mem::take(&mut self.scratch);
        buf.clear();
        put_varlen(&mut buf, range.len() as u64);
        let c = info.channel_count;
        let step = if info.nominal_rate_hz > 0.0 {
            1.0 / info.nominal_rate_hz
        } else {
            f64::NAN
        };
        let mut prev: Option<f64> = None;
        for i in range {
            let t = samples.timestamps[i];
            match prev {
                Some(p) if p + step == t => buf.push(0),
                _ => {
                    buf.push(8);
                    buf.extend_from_slice(&t.to_le_bytes());
                }
            }
            prev = Some(t);
            match (&samples.values, info.format()) {
                (SampleValues::Numeric(v), ChannelFormat::Float32) => {
                    for x in &v[i * c..(i + 1) * c] {
                        buf.extend_from_slice(&(*x as f32).to_le_bytes());
                    }
                }
                (SampleValues::Numeric(v), _) => {
                    for x in &v[i * c..(i + 1) * c] {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
                (SampleValues::Text(v), _) => {
                    for s in &v[i * c..(i + 1) * c] {
                        put_varlen(&mut buf, s.len() as u64);
                        buf.extend_from_slice(s.as_bytes());
                    }
                }
            }
        }
        let res = self.chunk(ChunkTag::Samples, Some(xdf_id), &buf);
        self.scratch = buf;
        res
    }

    pub fn clock_offset(&mut self, xdf_id: u32, m: &ClockOffsetMeasurement) -> io::Result<()> {
        let mut b = [0u8; 16];
        b[..8].copy_from_slice(&m.local_time.to_le_bytes());
        b[8..].copy_from_slice(&m.measured_offset.to_le_bytes());
        self.chunk(ChunkTag::ClockOffset, Some(xdf_id), &b)
    }

    pub fn boundary(&mut self) -> io::Result<()> {
        self.chunk(ChunkTag::Boundary, None, &BOUNDARY_UUID)
    }

    pub fn footer(&mut self, xdf_id: u32, xml: &str) -> io::Result<()> {
        self.chunk(ChunkTag::StreamFooter, Some(xdf_id), xml.as_bytes())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Serializes a session. Samples are interleaved across streams in windows of
/// [`BOUNDARY_INTERVAL_S`], each window closed by a Boundary chunk.
pub fn encode_session(session: &SessionRecording) -> Result<Vec<u8>, XdfError> {
    session.check()?;
    let mut w = XdfWriter::new(Vec::new(), &session.file_header_xml)?;
    for (i, s) in session.streams.iter().enumerate() {
        w.stream_header(i as u32 + 1, &s.info)?;
    }

    let t_min = session
        .streams
        .iter()
        .flat_map(|s| {
            s.samples
                .timestamps
                .first()
                .copied()
                .into_iter()
                .chain(s.clock_offsets.first().map(|m| m.local_time))
        })
        .fold(f64::INFINITY, f64::min);
    let mut sample_pos = vec![0usize; session.streams.len()];
    let mut offset_pos = vec![0usize; session.streams.len()];
    let remaining = |sp: &[usize], op: &[usize]| {
        session
            .streams
            .iter()
            .enumerate()
            .any(|(i, s)| sp[i] < s.samples.len() || op[i] < s.clock_offsets.len())
    };
    let mut window = 0.0f64;
    let mut stalled = false;
    while remaining(&sample_pos, &offset_pos) {
        // extreme timestamps can defeat window arithmetic; flush the rest at once
        let win_end = if stalled {
            f64::INFINITY
        } else {
            t_min + (window + 1.0) * BOUNDARY_INTERVAL_S
        };
        let before: usize = sample_pos.iter().chain(&offset_pos).sum();
        for (i, s) in session.streams.iter().enumerate() {
            let id = i as u32 + 1;
            let start = sample_pos[i];
            let ts = &s.samples.timestamps;
            let mut end = start;
            while end < ts.len() && ts[end] < win_end {
                end += 1;
            }
            if end > start {
                w.samples(id, &s.info, &s.samples, start..end)?;
                sample_pos[i] = end;
            }
            while offset_pos[i] < s.clock_offsets.len()
                && s.clock_offsets[offset_pos[i]].local_time < win_end
            {
                w.clock_offset(id, &s.clock_offsets[offset_pos[i]])?;
                offset_pos[i] += 1;
            }
        }
        stalled = sample_pos.iter().chain(&offset_pos).sum::<usize>() == before;
        w.boundary()?;
        // skip empty windows in one step
        let next = session
            .streams
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                s.samples
                    .timestamps
                    .get(sample_pos[i])
                    .copied()
                    .into_iter()
                    .chain(s.clock_offsets.get(offset_pos[i]).map(|m| m.local_time))
            })
            .fold(f64::INFINITY, f64::min);
        if next.is_finite() {
            window = ((next - t_min) / BOUNDARY_INTERVAL_S)
                .floor()
                .max(window + 1.0);
        }
    }

    for (i, s) in session.streams.iter().enumerate() {
        if !s.footer_xml.is_empty() {
            w.footer(i as u32 + 1, &s.footer_xml)?;
        }
    }
    Ok(w.into_inner())
}

// ---------------------------------------------------------------------------
// reading

/// Cursor over a byte slice that never reads past its end.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Option<f32> {
        self.take(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }

    /// Variable-length integer: marker byte (1, 4 or 8) then that many bytes.
    fn varlen(&mut self) -> Option<Result<u64, u8>> {
        let marker = self.u8()?;
        Some(Ok(match marker {
            1 => self.u8()? as u64,
            4 => self.u32()? as u64,
            8 => u64::from_le_bytes(self.take(8)?.try_into().unwrap()),
            m => return Some(Err(m)),
        }))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Splits a file into raw chunks, checking only framing.
pub fn read_chunks(bytes: &[u8]) -> Result<Vec<Chunk<'_>>, XdfError> {
    let mut chunks = Vec::new();
    for c in ChunkIter::new(bytes)? {
        chunks.push(c?);
    }
    Ok(chunks)
}

struct ChunkIter<'a> {
    cur: Cursor<'a>,
    failed: bool,
}

impl<'a> ChunkIter<'a> {
    fn new(bytes: &'a [u8]) -> Result<Self, XdfError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(XdfError::BadMagic);
        }
        Ok(Self {
            cur: Cursor { buf: bytes, pos: 4 },
            failed: false,
        })
    }
}

impl<'a> Iterator for ChunkIter<'a> {
    type Item = Result<Chunk<'a>, XdfError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.cur.remaining() == 0 {
            return None;
        }
        let offset = self.cur.pos;
        let res = (|| {
            let len = match self.cur.varlen() {
                None => return Err(XdfError::TruncatedChunk { offset }),
                Some(Err(marker)) => return Err(XdfError::InvalidLengthMarker { offset, marker }),
                Some(Ok(n)) => n,
            };
            if len < 2 {
                return Err(XdfError::MalformedChunk {
                    offset,
                    reason: format!("chunk length {len} < 2"),
                });
            }
            let len = usize::try_from(len).map_err(|_| XdfError::TruncatedChunk { offset })?;
            let body = self
                .cur
                .take(len)
                .ok_or(XdfError::TruncatedChunk { offset })?;
            let tag = u16::from_le_bytes([body[0], body[1]]);
            let mut payload = &body[2..];
            let mut stream_id = None;
            if ChunkTag::from_u16(tag).is_some_and(|t| t.has_stream_id()) {
                if payload.len() < 4 {
                    return Err(XdfError::MalformedChunk {
                        offset,
                        reason: "missing stream id".into(),
                    });
                }
                stream_id = Some(u32::from_le_bytes(payload[..4].try_into().unwrap()));
                payload = &payload[4..];
            }
            Ok(Chunk {
                offset,
                tag,
                stream_id,
                payload,
            })
        })();
        if res.is_err() {
            self.failed = true;
        }
        Some(res)
    }
}

fn parse_xml(text: &str) -> Result<roxmltree::Document<'_>, XdfError> {
    roxmltree::Document::parse(text).map_err(|e| XdfError::MalformedHeaderXml(e.to_string()))
}

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<&'a str> {
    node.children()
        .find(|n| n.has_tag_name(name))
        .map(|n| n.text().unwrap_or(""))
}

/// Parses a stream header XML document into a [`StreamInfo`].
pub fn parse_stream_header(xml: &str) -> Result<StreamInfo, XdfError> {
    let doc = parse_xml(xml)?;
    let root = doc.root_element();
    let bad = |m: &str| XdfError::MalformedHeaderXml(m.to_string());
    let stream_id = child_text(root, "name")
        .ok_or_else(|| bad("missing <name>"))?
        .to_string();
    let type_s = child_text(root, "type").ok_or_else(|| bad("missing <type>"))?;
    let kind =
        StreamKind::parse(type_s).ok_or_else(|| bad(&format!("unknown stream type {type_s:?}")))?;
    let channel_count: usize = child_text(root, "channel_count")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| bad("missing or invalid <channel_count>"))?;
    let nominal_rate_hz: f64 = child_text(root, "nominal_srate")
        .and_then(|s| s.trim().parse().ok())
        .filter(|r: &f64| r.is_finite() && *r >= 0.0)
        .ok_or_else(|| bad("missing or invalid <nominal_srate>"))?;
    let channel_format = match child_text(root, "channel_format") {
        Some(s) => ChannelFormat::parse(s.trim())
            .ok_or_else(|| bad(&format!("unsupported channel_format {s:?}")))?,
        None => kind.default_format(),
    };
    let desc = root.children().find(|n| n.has_tag_name("desc"));
    let mut channel_labels: Vec<String> = desc
        .and_then(|d| d.children().find(|n| n.has_tag_name("channels")))
        .map(|chs| {
            chs.children()
                .filter(|n| n.has_tag_name("channel"))
                .map(|c| child_text(c, "label").unwrap_or("").to_string())
                .collect()
        })
        .unwrap_or_default();
    if channel_labels.is_empty() && channel_count <= 4096 {
        channel_labels = (0..channel_count).map(|i| format!("ch{}", i + 1)).collect();
    }
    if channel_labels.len() != channel_count || channel_count == 0 {
        return Err(bad("channel labels do not match channel_count"));
    }
    let source_metadata = desc
        .and_then(|d| d.children().find(|n| n.has_tag_name("metadata")))
        .map(|m| {
            m.children()
                .filter(|n| n.has_tag_name("entry"))
                .filter_map(|e| {
                    Some((
                        e.attribute("key")?.to_string(),
                        e.text().unwrap_or("").to_string(),
                    ))
                })
                .collect()
        })
        .unwrap_or_default();
    Ok(StreamInfo {
        stream_id,
        kind,
        channel_count,
        nominal_rate_hz,
        channel_labels,
        source_metadata,
        channel_format,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DecodeOptions {
    /// Stop quietly (with a warning) at a truncated trailing chunk instead of
    /// failing; recovers files from an interrupted recorder.
    pub recover_truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub session: SessionRecording,
    pub warnings: Vec<String>,
}

pub fn decode_session(bytes: &[u8]) -> Result<SessionRecording, XdfError> {
    decode_session_with(bytes, DecodeOptions::default()).map(|d| d.session)
}

pub fn decode_session_with(bytes: &[u8], opts: DecodeOptions) -> Result<Decoded, XdfError> {
    let mut warnings = Vec::new();
    let mut file_header: Option<String> = None;
    let mut streams: Vec<RecordedStream> = Vec::new();
    let mut by_xdf_id: HashMap<u32, usize> = HashMap::new();
    let mut last_ts: Vec<Option<f64>> = Vec::new();

    for chunk in ChunkIter::new(bytes)? {
        let chunk = match chunk {
            Ok(c) => c,
            Err(XdfError::TruncatedChunk { offset }) if opts.recover_truncated => {
                warnings.push(format!(
                    "truncated chunk at byte {offset}; ignoring the rest of the file"
                ));
                break;
            }
            Err(e) => return Err(e),
        };
        let malformed = |reason: String| XdfError::MalformedChunk {
            offset: chunk.offset,
            reason,
        };
        let utf8 = |p: &[u8]| {
            std::str::from_utf8(p)
                .map(str::to_string)
                .map_err(|e| XdfError::MalformedHeaderXml(e.to_string()))
        };
        let Some(tag) = ChunkTag::from_u16(chunk.tag) else {
            warnings.push(format!(
                "skipped chunk with unknown tag {} at byte {}",
                chunk.tag, chunk.offset
            ));
            continue;
        };
        match tag {
            ChunkTag::FileHeader => {
                let xml = utf8(chunk.payload)?;
                parse_xml(&xml)?;
                if file_header.is_some() {
                    warnings.push(format!(
                        "extra file header at byte {} ignored",
                        chunk.offset
                    ));
                } else {
                    file_header = Some(xml);
                }
            }
            ChunkTag::StreamHeader => {
                let id = chunk.stream_id.unwrap_or_default();
                let info = parse_stream_header(&utf8(chunk.payload)?)?;
                if streams.iter().any(|s| s.info.stream_id == info.stream_id)
                    && !by_xdf_id.contains_key(&id)
                {
                    warnings.push(format!(
                        "duplicate stream name {:?} ignored",
                        info.stream_id
                    ));
                } else if let std::collections::hash_map::Entry::Vacant(slot) = by_xdf_id.entry(id)
                {
                    slot.insert(streams.len());
                    streams.push(RecordedStream::new(info));
                    last_ts.push(None);
                } else {
                    warnings.push(format!("duplicate header for stream {id} ignored"));
                }
            }
            ChunkTag::Samples => {
                let id = chunk.stream_id.unwrap_or_default();
                let Some(&idx) = by_xdf_id.get(&id) else {
                    warnings.push(format!("samples for undeclared stream {id} skipped"));
                    continue;
                };
                let stream = &mut streams[idx];
                let (ts, vals) = parse_samples(
                    chunk.payload,
                    &stream.info,
                    &mut last_ts[idx],
                    &mut warnings,
                )
                .map_err(malformed)?;
                stream.samples.timestamps.extend(ts);
                match (&mut stream.samples.values, vals) {
                    (SampleValues::Numeric(dst), SampleValues::Numeric(src)) => dst.extend(src),
                    (SampleValues::Text(dst), SampleValues::Text(src)) => dst.extend(src),
                    _ => unreachable!("value type follows the stream format"),
                }
            }
            ChunkTag::ClockOffset => {
                let id = chunk.stream_id.unwrap_or_default();
                let Some(&idx) = by_xdf_id.get(&id) else {
                    warnings.push(format!("clock offset for undeclared stream {id} skipped"));
                    continue;
                };
                if chunk.payload.len() != 16 {
                    return Err(malformed(format!(
                        "clock offset payload of {} bytes",
                        chunk.payload.len()
                    )));
                }
                let local_time = f64::from_le_bytes(chunk.payload[..8].try_into().unwrap());
                let measured_offset = f64::from_le_bytes(chunk.payload[8..].try_into().unwrap());
                streams[idx].clock_offsets.push(ClockOffsetMeasurement {
                    local_time,
                    measured_offset,
                });
            }
            ChunkTag::Boundary => {
                if chunk.payload != BOUNDARY_UUID {
                    warnings.push(format!(
                        "boundary chunk at byte {} has an unexpected payload",
                        chunk.offset
                    ));
                }
            }
            ChunkTag::StreamFooter => {
                let id = chunk.stream_id.unwrap_or_default();
                let xml = utf8(chunk.payload)?;
                parse_xml(&xml)?;
                match by_xdf_id.get(&id) {
                    Some(&idx) => streams[idx].footer_xml = xml,
                    None => warnings.push(format!("footer for undeclared stream {id} skipped")),
                }
            }
        }
    }

    let file_header_xml = match file_header {
        Some(h) => h,
        None => {
            warnings.push("file header missing".into());
            String::new()
        }
    };
    Ok(Decoded {
        session: SessionRecording {
            file_header_xml,
            streams,
        },
        warnings,
    })
}

fn parse_samples(
    payload: &[u8],
    info: &StreamInfo,
    last_ts: &mut Option<f64>,
    warnings: &mut Vec<String>,
) -> Result<(Vec<f64>, SampleValues), String> {
    let mut cur = Cursor {
        buf: payload,
        pos: 0,
    };
    let n = match cur.varlen() {
        Some(Ok(n)) => n,
        Some(Err(m)) => return Err(format!("invalid sample-count marker {m}")),
        None => return Err("missing sample count".into()),
    };
    let c = info.channel_count;
    let value_bytes = match info.format() {
        ChannelFormat::Float32 => 4,
        ChannelFormat::Double64 => 8,
        ChannelFormat::String => 2,
    };
    // every sample needs at least a flag byte plus its values
    let min_row = 1 + c.saturating_mul(value_bytes);
    if n > (cur.remaining() / min_row.max(1)) as u64 {
        return Err(format!("sample count {n} exceeds chunk size"));
    }
    let n = n as usize;
    let step = if info.nominal_rate_hz > 0.0 {
        1.0 / info.nominal_rate_hz
    } else {
        0.0
    };
    let mut ts = Vec::with_capacity(n);
    let mut values = SampleValues::empty_for(info.format());
    let short = || "sample data runs past chunk end".to_string();
    for _ in 0..n {
        let t = match cur.u8().ok_or_else(short)? {
            8 => cur.f64().ok_or_else(short)?,
            0 => match *last_ts {
                Some(p) => p + step,
                None => {
                    warnings.push(format!(
                        "stream {}: first sample lacks a timestamp; assuming 0",
                        info.stream_id
                    ));
                    0.0
                }
            },
            f => return Err(format!("invalid timestamp flag {f}")),
        };
        *last_ts = Some(t);
        ts.push(t);
        match &mut values {
            SampleValues::Numeric(v) => {
                for _ in 0..c {
                    let x = if info.format() == ChannelFormat::Float32 {
                        cur.f32().ok_or_else(short)? as f64
                    } else {
                        cur.f64().ok_or_else(short)?
                    };
                    v.push(x);
                }
            }
            SampleValues::Text(v) => {
                for _ in 0..c {
                    let len = match cur.varlen() {
                        Some(Ok(l)) => l,
                        Some(Err(m)) => return Err(format!("invalid string length marker {m}")),
                        None => return Err(short()),
                    };
                    let len = usize::try_from(len).map_err(|_| short())?;
                    let bytes = cur.take(len).ok_or_else(short)?;
                    v.push(
                        String::from_utf8(bytes.to_vec())
                            .map_err(|_| "string value is not UTF-8".to_string())?,
                    );
                }
            }
        }
    }
    if cur.remaining() != 0 {
        warnings.push(format!(
            "stream {}: {} trailing bytes in samples chunk",
            info.stream_id,
            cur.remaining()
        ));
    }
    Ok((ts, values))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct StreamSummary {
    pub stream_id: String,
    pub kind: StreamKind,
    pub nominal_rate_hz: f64,
    pub channel_count: usize,
    pub sample_count: usize,
    pub duration_s: f64,
    pub offset_probe_count: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SessionSummary {
    pub streams: Vec<StreamSummary>,
    pub warnings: Vec<String>,
}

pub fn summarize(session: &SessionRecording) -> Vec<StreamSummary> {
    session
        .streams
        .iter()
        .map(|s| {
            let ts = &s.samples.timestamps;
            let duration_s = match (ts.first(), ts.last()) {
                (Some(a), Some(b)) => b - a,
                _ => 0.0,
            };
            StreamSummary {
                stream_id: s.info.stream_id.clone(),
                kind: s.info.kind,
                nominal_rate_hz: s.info.nominal_rate_hz,
                channel_count: s.info.channel_count,
                sample_count: ts.len(),
                duration_s,
                offset_probe_count: s.clock_offsets.len(),
            }
        })
        .collect()
}

/// Per-stream summary of an encoded file.
pub fn inspect(bytes: &[u8]) -> Result<SessionSummary, XdfError> {
    let decoded = decode_session_with(bytes, DecodeOptions::default())?;
    Ok(SessionSummary {
        streams: summarize(&decoded.session),
        warnings: decoded.warnings,
    })
}
