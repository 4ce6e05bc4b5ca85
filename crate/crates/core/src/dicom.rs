//! DICOM Part-10 subset: Explicit VR Little Endian, uncompressed pixels.
//!
//! Files are parsed into a flat, strictly ordered element list. Sequences
//! and unknown tags are kept as opaque bytes so re-serialization is exact.
//! The writer exists to manufacture test corpora and to emit anonymized
//! copies.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GrayImage;

pub const PREAMBLE_LEN: usize = 128;
pub const MAGIC: &[u8; 4] = b"DICM";
pub const EXPLICIT_VR_LITTLE_ENDIAN: &str = "1.2.840.10008.1.2.1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag {
    pub group: u16,
    pub element: u16,
}

impl Tag {
    pub const fn new(group: u16, element: u16) -> Self {
        Self { group, element }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04X},{:04X})", self.group, self.element)
    }
}

pub mod tags {
    use super::Tag;

    pub const META_GROUP_LENGTH: Tag = Tag::new(0x0002, 0x0000);
    pub const META_VERSION: Tag = Tag::new(0x0002, 0x0001);
    pub const MEDIA_SOP_CLASS: Tag = Tag::new(0x0002, 0x0002);
    pub const MEDIA_SOP_INSTANCE: Tag = Tag::new(0x0002, 0x0003);
    pub const TRANSFER_SYNTAX: Tag = Tag::new(0x0002, 0x0010);
    pub const MODALITY: Tag = Tag::new(0x0008, 0x0060);
    pub const INSTITUTION_NAME: Tag = Tag::new(0x0008, 0x0080);
    pub const INSTITUTION_ADDRESS: Tag = Tag::new(0x0008, 0x0081);
    pub const REFERRING_PHYSICIAN: Tag = Tag::new(0x0008, 0x0090);
    pub const PERFORMING_PHYSICIAN: Tag = Tag::new(0x0008, 0x1050);
    pub const READING_PHYSICIAN: Tag = Tag::new(0x0008, 0x1060);
    pub const OPERATORS_NAME: Tag = Tag::new(0x0008, 0x1070);
    pub const PHYSICIAN_OF_RECORD: Tag = Tag::new(0x0008, 0x1048);
    pub const PATIENT_NAME: Tag = Tag::new(0x0010, 0x0010);
    pub const PATIENT_ID: Tag = Tag::new(0x0010, 0x0020);
    pub const PATIENT_BIRTH_DATE: Tag = Tag::new(0x0010, 0x0030);
    pub const PATIENT_SEX: Tag = Tag::new(0x0010, 0x0040);
    pub const OTHER_PATIENT_IDS: Tag = Tag::new(0x0010, 0x1000);
    pub const OTHER_PATIENT_NAMES: Tag = Tag::new(0x0010, 0x1001);
    pub const PATIENT_AGE: Tag = Tag::new(0x0010, 0x1010);
    pub const PATIENT_ADDRESS: Tag = Tag::new(0x0010, 0x1040);
    pub const PATIENT_TELEPHONE: Tag = Tag::new(0x0010, 0x2154);
    pub const SAMPLES_PER_PIXEL: Tag = Tag::new(0x0028, 0x0002);
    pub const PHOTOMETRIC: Tag = Tag::new(0x0028, 0x0004);
    pub const ROWS: Tag = Tag::new(0x0028, 0x0010);
    pub const COLUMNS: Tag = Tag::new(0x0028, 0x0011);
    pub const BITS_ALLOCATED: Tag = Tag::new(0x0028, 0x0100);
    pub const BITS_STORED: Tag = Tag::new(0x0028, 0x0101);
    pub const HIGH_BIT: Tag = Tag::new(0x0028, 0x0102);
    pub const PIXEL_REPRESENTATION: Tag = Tag::new(0x0028, 0x0103);
    pub const PIXEL_DATA: Tag = Tag::new(0x7FE0, 0x0010);
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DicomError {
    #[error("missing \"DICM\" marker at byte {PREAMBLE_LEN}")]
    MissingMarker,
    #[error("unsupported transfer syntax {0:?}; only Explicit VR Little Endian ({EXPLICIT_VR_LITTLE_ENDIAN}) is handled")]
    UnsupportedTransferSyntax(String),
    #[error("file meta information has no transfer syntax (0002,0010)")]
    MissingTransferSyntax,
    #[error("truncated element at byte {offset}: {detail}")]
    Truncated { offset: usize, detail: String },
    #[error("invalid value representation {vr:?} at byte {offset}")]
    BadVr { offset: usize, vr: [u8; 2] },
    #[error("element {tag} at byte {offset} has undefined length, which this subset does not support")]
    UndefinedLength { tag: Tag, offset: usize },
    #[error("element {tag} at byte {offset} is not after {previous}")]
    OutOfOrder { tag: Tag, previous: Tag, offset: usize },
    #[error("bits allocated {0} is not supported (expected 8 or 16)")]
    BitsAllocated(u16),
    #[error("element {tag} has {len} bytes, which does not fit a {vr} value")]
    ValueLength { tag: Tag, vr: String, len: usize },
    #[error("missing required element {0}")]
    Missing(Tag),
    #[error("unsupported photometric interpretation {0:?}")]
    Photometric(String),
    #[error("samples per pixel {0} is not supported (expected 1)")]
    SamplesPerPixel(u16),
    #[error("pixel data holds {found} bytes, {expected} needed for the declared geometry")]
    PixelDataLength { expected: usize, found: usize },
    #[error("element {tag} value exceeds the {max}-byte limit of its length field")]
    TooLong { tag: Tag, max: u64 },
    #[error("policy may not remove pixel data")]
    PolicyRemovesPixels,
}

pub type Result<T> = std::result::Result<T, DicomError>;

/// Value representations encoded with two reserved bytes and a 32-bit length.
const LONG_VRS: [&[u8; 2]; 13] = [
    b"OB", b"OD", b"OF", b"OL", b"OV", b"OW", b"SQ", b"SV", b"UC", b"UN", b"UR", b"UT", b"UV",
];

pub fn is_long_vr(vr: [u8; 2]) -> bool {
    LONG_VRS.iter().any(|v| **v == vr)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DicomElement {
    pub tag: Tag,
    pub vr: [u8; 2],
    pub value: Vec<u8>,
}

impl DicomElement {
    pub fn new(tag: Tag, vr: &str, value: Vec<u8>) -> Self {
        let b = vr.as_bytes();
        Self {
            tag,
            vr: [b[0], b[1]],
            value,
        }
    }

    pub fn vr_str(&self) -> &str {
        std::str::from_utf8(&self.vr).unwrap_or("??")
    }

    /// Text value with trailing NUL and space padding removed.
    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.value)
            .trim_end_matches(['\0', ' '])
            .to_string()
    }

    pub fn u16(&self) -> Result<u16> {
        match self.value.as_slice() {
            [a, b] => Ok(u16::from_le_bytes([*a, *b])),
            _ => Err(DicomError::ValueLength {
                tag: self.tag,
                vr: self.vr_str().to_string(),
                len: self.value.len(),
            }),
        }
    }

    fn encoded_len(&self) -> usize {
        let header = if is_long_vr(self.vr) { 12 } else { 8 };
        header + self.value.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DicomFile {
    pub preamble: [u8; PREAMBLE_LEN],
    pub elements: Vec<DicomElement>,
}

/// Pixel geometry of a parsed file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelInfo {
    pub rows: u16,
    pub columns: u16,
    pub bits_allocated: u16,
}

impl DicomFile {
    pub fn get(&self, tag: Tag) -> Option<&DicomElement> {
        self.elements
            .binary_search_by(|e| e.tag.cmp(&tag))
            .ok()
            .map(|i| &self.elements[i])
    }

    pub fn transfer_syntax(&self) -> Option<String> {
        self.get(tags::TRANSFER_SYNTAX).map(DicomElement::text)
    }

    fn required_u16(&self, tag: Tag) -> Result<u16> {
        self.get(tag).ok_or(DicomError::Missing(tag))?.u16()
    }

    /// Geometry when pixel data is present.
    pub fn pixel_info(&self) -> Result<Option<PixelInfo>> {
        if self.get(tags::PIXEL_DATA).is_none() {
            return Ok(None);
        }
        let info = PixelInfo {
            rows: self.required_u16(tags::ROWS)?,
            columns: self.required_u16(tags::COLUMNS)?,
            bits_allocated: self.required_u16(tags::BITS_ALLOCATED)?,
        };
        if !matches!(info.bits_allocated, 8 | 16) {
            return Err(DicomError::BitsAllocated(info.bits_allocated));
        }
        Ok(Some(info))
    }

    pub fn pixel_data(&self) -> Option<&[u8]> {
        self.get(tags::PIXEL_DATA).map(|e| e.value.as_slice())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DicomError::Truncated {
                offset: self.pos,
                detail: format!(
                    "{what} needs {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn peek_group(&self) -> Option<u16> {
        let b = self.bytes.get(self.pos..self.pos + 2)?;
        Some(u16::from_le_bytes([b[0], b[1]]))
    }
}

fn read_element(cur: &mut Cursor<'_>, previous: Option<Tag>) -> Result<DicomElement> {
    let start = cur.pos;
    let group = cur.u16("tag group")?;
    let element = cur.u16("tag element")?;
    let tag = Tag::new(group, element);
    if let Some(previous) = previous {
        if tag <= previous {
            return Err(DicomError::OutOfOrder {
                tag,
                previous,
                offset: start,
            });
        }
    }
    let vr_bytes = cur.take(2, "value representation")?;
    let vr = [vr_bytes[0], vr_bytes[1]];
    if !vr.iter().all(u8::is_ascii_uppercase) {
        return Err(DicomError::BadVr { offset: start + 4, vr });
    }
    let len = if is_long_vr(vr) {
        cur.take(2, "reserved bytes")?;
        let len = cur.u32("value length")?;
        if len == u32::MAX {
            return Err(DicomError::UndefinedLength { tag, offset: start });
        }
        len as usize
    } else {
        cur.u16("value length")? as usize
    };
    let value = cur
        .take(len, &format!("value of {tag}"))
        .map_err(|e| match e {
            DicomError::Truncated { detail, .. } => DicomError::Truncated { offset: start, detail },
            other => other,
        })?
        .to_vec();
    Ok(DicomElement { tag, vr, value })
}

/// Parses a Part-10 file. The file meta group is read first so a foreign
/// transfer syntax is reported by name before its dataset is touched.
pub fn parse(bytes: &[u8]) -> Result<DicomFile> {
    if bytes.len() < PREAMBLE_LEN + 4 || &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] != MAGIC {
        return Err(DicomError::MissingMarker);
    }
    let mut preamble = [0u8; PREAMBLE_LEN];
    preamble.copy_from_slice(&bytes[..PREAMBLE_LEN]);
    let mut cur = Cursor {
        bytes,
        pos: PREAMBLE_LEN + 4,
    };
    let mut elements: Vec<DicomElement> = Vec::new();
    while cur.peek_group() == Some(0x0002) {
        let e = read_element(&mut cur, elements.last().map(|e| e.tag))?;
        elements.push(e);
    }
    let file = DicomFile { preamble, elements };
    match file.transfer_syntax() {
        None => return Err(DicomError::MissingTransferSyntax),
        Some(ts) if ts != EXPLICIT_VR_LITTLE_ENDIAN => {
            return Err(DicomError::UnsupportedTransferSyntax(ts))
        }
        Some(_) => {}
    }
    let DicomFile {
        preamble,
        mut elements,
    } = file;
    while !cur.at_end() {
        let e = read_element(&mut cur, elements.last().map(|e| e.tag))?;
        elements.push(e);
    }
    let file = DicomFile { preamble, elements };
    file.pixel_info()?;
    Ok(file)
}

/// Serializes elements verbatim, in list order.
pub fn write(file: &DicomFile) -> Result<Vec<u8>> {
    let body: usize = file.elements.iter().map(DicomElement::encoded_len).sum();
    let mut out = Vec::with_capacity(PREAMBLE_LEN + 4 + body);
    out.extend_from_slice(&file.preamble);
    out.extend_from_slice(MAGIC);
    for e in &file.elements {
        out.extend_from_slice(&e.tag.group.to_le_bytes());
        out.extend_from_slice(&e.tag.element.to_le_bytes());
        out.extend_from_slice(&e.vr);
        if is_long_vr(e.vr) {
            let len = u32::try_from(e.value.len())
                .ok()
                .filter(|&l| l != u32::MAX)
                .ok_or(DicomError::TooLong {
                    tag: e.tag,
                    max: u32::MAX as u64 - 1,
                })?;
            out.extend_from_slice(&[0, 0]);
            out.extend_from_slice(&len.to_le_bytes());
        } else {
            let len = u16::try_from(e.value.len()).map_err(|_| DicomError::TooLong {
                tag: e.tag,
                max: u16::MAX as u64,
            })?;
            out.extend_from_slice(&len.to_le_bytes());
        }
        out.extend_from_slice(&e.value);
    }
    Ok(out)
}

/// Assembles well-formed files: sorts elements, pads odd-length values the
/// way the standard prescribes and fills in the meta group length.
#[derive(Debug, Clone, Default)]
pub struct DicomBuilder {
    elements: Vec<DicomElement>,
}

impl DicomBuilder {
    /// Starts a file with the mandatory meta elements.
    pub fn new() -> Self {
        Self::default()
            .bytes(tags::META_VERSION, "OB", vec![0, 1])
            .text(tags::MEDIA_SOP_CLASS, "UI", "1.2.840.10008.5.1.4.1.1.1.1")
            .text(tags::MEDIA_SOP_INSTANCE, "UI", "1.2.826.0.1.3680043.2.1125.1")
            .text(tags::TRANSFER_SYNTAX, "UI", EXPLICIT_VR_LITTLE_ENDIAN)
    }

    /// Replaces any existing element with the same tag.
    pub fn bytes(mut self, tag: Tag, vr: &str, mut value: Vec<u8>) -> Self {
        if value.len() % 2 == 1 {
            let pad = if matches!(vr, "UI" | "OB" | "UN") { 0 } else { b' ' };
            value.push(pad);
        }
        self.elements.retain(|e| e.tag != tag);
        self.elements.push(DicomElement::new(tag, vr, value));
        self
    }

    pub fn text(self, tag: Tag, vr: &str, value: &str) -> Self {
        self.bytes(tag, vr, value.as_bytes().to_vec())
    }

    pub fn u16(self, tag: Tag, value: u16) -> Self {
        self.bytes(tag, "US", value.to_le_bytes().to_vec())
    }

    /// Monochrome pixel module plus pixel data. `samples` holds one value per
    /// pixel; with 8 bits allocated each must fit a byte.
    pub fn pixels(self, rows: u16, columns: u16, bits_allocated: u16, photometric: &str, samples: &[u16]) -> Self {
        let (vr, data) = if bits_allocated == 8 {
            ("OB", samples.iter().map(|&s| s as u8).collect())
        } else {
            ("OW", samples.iter().flat_map(|s| s.to_le_bytes()).collect())
        };
        self.u16(tags::SAMPLES_PER_PIXEL, 1)
            .text(tags::PHOTOMETRIC, "CS", photometric)
            .u16(tags::ROWS, rows)
            .u16(tags::COLUMNS, columns)
            .u16(tags::BITS_ALLOCATED, bits_allocated)
            .u16(tags::BITS_STORED, bits_allocated)
            .u16(tags::HIGH_BIT, bits_allocated.saturating_sub(1))
            .u16(tags::PIXEL_REPRESENTATION, 0)
            .bytes(tags::PIXEL_DATA, vr, data)
    }

    pub fn build(mut self) -> DicomFile {
        self.elements.retain(|e| e.tag != tags::META_GROUP_LENGTH);
        self.elements.sort_by_key(|e| e.tag);
        let meta_len: usize = self
            .elements
            .iter()
            .filter(|e| e.tag.group == 0x0002)
            .map(DicomElement::encoded_len)
            .sum();
        self.elements.insert(
            0,
            DicomElement::new(tags::META_GROUP_LENGTH, "UL", (meta_len as u32).to_le_bytes().to_vec()),
        );
        DicomFile {
            preamble: [0; PREAMBLE_LEN],
            elements: self.elements,
        }
    }
}

/// Which elements count as protected health information.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhiPolicy {
    tags: BTreeSet<Tag>,
    groups: BTreeSet<u16>,
}

impl PhiPolicy {
    /// `tags` are removed individually; every element of `groups` is removed.
    pub fn new(tags: impl IntoIterator<Item = Tag>, groups: impl IntoIterator<Item = u16>) -> Result<Self> {
        let policy = Self {
            tags: tags.into_iter().collect(),
            groups: groups.into_iter().collect(),
        };
        if policy.removes(tags::PIXEL_DATA) {
            return Err(DicomError::PolicyRemovesPixels);
        }
        Ok(policy)
    }

    pub fn removes(&self, tag: Tag) -> bool {
        self.tags.contains(&tag) || self.groups.contains(&tag.group)
    }

    pub fn tags(&self) -> &BTreeSet<Tag> {
        &self.tags
    }

    pub fn groups(&self) -> &BTreeSet<u16> {
        &self.groups
    }
}

impl Default for PhiPolicy {
    /// Patient identity tags, the whole patient group, and institution and
    /// physician names.
    fn default() -> Self {
        use tags::*;
        Self::new(
            [
                PATIENT_NAME,
                PATIENT_ID,
                PATIENT_BIRTH_DATE,
                PATIENT_SEX,
                OTHER_PATIENT_IDS,
                OTHER_PATIENT_NAMES,
                PATIENT_AGE,
                PATIENT_ADDRESS,
                PATIENT_TELEPHONE,
                INSTITUTION_NAME,
                INSTITUTION_ADDRESS,
                REFERRING_PHYSICIAN,
                PERFORMING_PHYSICIAN,
                READING_PHYSICIAN,
                OPERATORS_NAME,
                PHYSICIAN_OF_RECORD,
            ],
            [0x0010],
        )
        .expect("default policy keeps pixel data")
    }
}

/// One removed element, as written to the quarantine sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineRecord {
    pub group: String,
    pub element: String,
    pub vr: String,
    pub value_hex: String,
}

impl QuarantineRecord {
    fn of(e: &DicomElement) -> Self {
        Self {
            group: format!("{:04X}", e.tag.group),
            element: format!("{:04X}", e.tag.element),
            vr: e.vr_str().to_string(),
            value_hex: e.value.iter().map(|b| format!("{b:02x}")).collect(),
        }
    }
}

/// Splits `file` into a copy without policy tags and the removed elements.
pub fn anonymize(file: &DicomFile, policy: &PhiPolicy) -> (DicomFile, Vec<QuarantineRecord>) {
    let (removed, kept): (Vec<&DicomElement>, Vec<&DicomElement>) =
        file.elements.iter().partition(|e| policy.removes(e.tag));
    let clean = DicomFile {
        preamble: file.preamble,
        elements: kept.into_iter().cloned().collect(),
    };
    (clean, removed.into_iter().map(QuarantineRecord::of).collect())
}

/// Sidecar text, one JSON object per line.
pub fn quarantine_jsonl(records: &[QuarantineRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("plain strings serialize") + "\n")
        .collect()
}

/// Converts monochrome pixel data to an 8-bit image.
///
/// 8-bit data is copied as is. 16-bit data is min-max scaled to 0..=255
/// (rounded); a constant image maps to 0. MONOCHROME1 is inverted so that
/// bright always means dense.
pub fn export_image(file: &DicomFile) -> Result<GrayImage> {
    let info = file.pixel_info()?.ok_or(DicomError::Missing(tags::PIXEL_DATA))?;
    if let Some(e) = file.get(tags::SAMPLES_PER_PIXEL) {
        let samples = e.u16()?;
        if samples != 1 {
            return Err(DicomError::SamplesPerPixel(samples));
        }
    }
    let photometric = file
        .get(tags::PHOTOMETRIC)
        .ok_or(DicomError::Missing(tags::PHOTOMETRIC))?
        .text();
    let invert = match photometric.as_str() {
        "MONOCHROME1" => true,
        "MONOCHROME2" => false,
        _ => return Err(DicomError::Photometric(photometric)),
    };
    let signed = match file.get(tags::PIXEL_REPRESENTATION) {
        Some(e) => e.u16()? == 1,
        None => false,
    };
    let n = info.rows as usize * info.columns as usize;
    let bytes_per = info.bits_allocated as usize / 8;
    let data = file.pixel_data().expect("checked by pixel_info");
    if data.len() < n * bytes_per {
        return Err(DicomError::PixelDataLength {
            expected: n * bytes_per,
            found: data.len(),
        });
    }
    let mut pixels: Vec<u8> = if bytes_per == 1 {
        data[..n].to_vec()
    } else {
        let values: Vec<i32> = data[..2 * n]
            .chunks_exact(2)
            .map(|c| {
                let raw = u16::from_le_bytes([c[0], c[1]]);
                if signed {
                    raw as i16 as i32
                } else {
                    raw as i32
                }
            })
            .collect();
        let lo = values.iter().copied().min().unwrap_or(0);
        let hi = values.iter().copied().max().unwrap_or(0);
        if hi == lo {
            vec![0; n]
        } else {
            let span = (hi - lo) as i64;
            values
                .iter()
                .map(|&v| (((v - lo) as i64 * 255 * 2 + span) / (2 * span)) as u8)
                .collect()
        }
    };
    if invert {
        pixels.iter_mut().for_each(|p| *p = 255 - *p);
    }
    Ok(GrayImage::new(info.columns as usize, info.rows as usize, pixels).expect("length checked"))
}

/// A random well-formed file for test corpora: a random subset of PHI,
/// institution and private elements, and a small 8- or 16-bit image.
pub fn synthetic_file(seed: u64) -> DicomFile {
    const TEXT: [(Tag, &str); 14] = [
        (tags::MODALITY, "CS"),
        (tags::INSTITUTION_NAME, "LO"),
        (tags::INSTITUTION_ADDRESS, "ST"),
        (tags::REFERRING_PHYSICIAN, "PN"),
        (tags::PERFORMING_PHYSICIAN, "PN"),
        (tags::OPERATORS_NAME, "PN"),
        (tags::PATIENT_NAME, "PN"),
        (tags::PATIENT_ID, "LO"),
        (tags::PATIENT_BIRTH_DATE, "DA"),
        (tags::PATIENT_SEX, "CS"),
        (tags::PATIENT_AGE, "AS"),
        (tags::OTHER_PATIENT_IDS, "LO"),
        (Tag::new(0x0010, 0x4000), "LT"),
        (Tag::new(0x0020, 0x000D), "UI"),
    ];
    const PRIVATE_VRS: [&str; 5] = ["LO", "SH", "OB", "UN", "UT"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut builder = DicomBuilder::new();
    for (tag, vr) in TEXT {
        if rng.random_bool(0.6) {
            let len = rng.random_range(1..24);
            let value: String = (0..len).map(|_| rng.random_range(b'A'..=b'Z') as char).collect();
            builder = builder.text(tag, vr, &value);
        }
    }
    for _ in 0..rng.random_range(0..4) {
        let tag = Tag::new(0x0009 + 2 * rng.random_range(0..8u16), rng.random_range(0x0010..0x00FF));
        let vr = PRIVATE_VRS[rng.random_range(0..PRIVATE_VRS.len())];
        let value: Vec<u8> = (0..rng.random_range(0..40)).map(|_| rng.random()).collect();
        builder = builder.bytes(tag, vr, value);
    }
    let (rows, columns) = (rng.random_range(1..24u16), rng.random_range(1..24u16));
    let bits = if rng.random_bool(0.5) { 8 } else { 16 };
    let max = if bits == 8 { 255 } else { u16::MAX };
    let samples: Vec<u16> = (0..rows as usize * columns as usize)
        .map(|_| rng.random_range(0..=max))
        .collect();
    let photometric = if rng.random_bool(0.8) { "MONOCHROME2" } else { "MONOCHROME1" };
    builder.pixels(rows, columns, bits, photometric, &samples).build()
}
