//! Memory-mapped record region.
//!
//! Layout (all integers little-endian, see `docs/records.md`):
//!
//! ```text
//! 0    magic "ANCR"
//! 4    format_version u32
//! 8    schema_version u32
//! 12   group_count u32
//! 16   region_length u64
//! 24   version_counter u64          (global write bracket)
//! 32   reserved [u8; 32]
//! 64   group descriptors, 63 x 64 B (name, type, role, arity, offset, seq)
//! 4096 packed group arrays, each 8-byte aligned
//! ```
//!
//! The descriptor table has fixed capacity so extending the schema never
//! moves existing data: new groups append descriptors and data past the
//! current end of file, and offsets of existing groups are stable across
//! every schema version.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::Path;
use std::sync::atomic::{fence, AtomicU64, Ordering};

use memmap2::MmapMut;

use super::RecordError;

pub const REGION_MAGIC: [u8; 4] = *b"ANCR";
pub const REGION_FORMAT_VERSION: u32 = 1;

/// Descriptor slots reserved in the header area.
pub const MAX_GROUPS: usize = 63;

/// Where group data begins: 64-byte header + 63 descriptors of 64 bytes.
pub const DATA_START: u64 = 4096;

/// Snapshot retry budget before reporting contention.
pub const DEFAULT_SNAPSHOT_RETRIES: usize = 64;

const HEADER_LEN: usize = 64;
const DESC_LEN: usize = 64;
const MAX_NAME_LEN: usize = 32;

const OFF_SCHEMA_VERSION: usize = 8;
const OFF_GROUP_COUNT: usize = 12;
const OFF_REGION_LENGTH: usize = 16;
const OFF_VERSION_COUNTER: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    I64,
    F64,
    /// Fixed-capacity byte string; stored as `len(u32) + data`, padded to 8.
    Bytes { max_len: u32 },
}

impl ElementType {
    fn code(self) -> u8 {
        match self {
            ElementType::I64 => 0,
            ElementType::F64 => 1,
            ElementType::Bytes { .. } => 2,
        }
    }

    fn size(self) -> u64 {
        match self {
            ElementType::I64 | ElementType::F64 => 8,
            ElementType::Bytes { max_len } => ((4 + max_len as u64) + 7) & !7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriterRole {
    Ingestion,
    Feedback,
}

impl WriterRole {
    fn code(self) -> u8 {
        match self {
            WriterRole::Ingestion => 0,
            WriterRole::Feedback => 1,
        }
    }

    fn from_code(c: u8) -> Option<WriterRole> {
        match c {
            0 => Some(WriterRole::Ingestion),
            1 => Some(WriterRole::Feedback),
            _ => None,
        }
    }
}

/// One typed array in the region.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGroup {
    pub name: String,
    pub element_type: ElementType,
    pub arity: u32,
    pub writer_role: WriterRole,
}

impl FieldGroup {
    pub fn i64(name: &str, arity: u32, role: WriterRole) -> FieldGroup {
        FieldGroup {
            name: name.into(),
            element_type: ElementType::I64,
            arity,
            writer_role: role,
        }
    }

    pub fn f64(name: &str, arity: u32, role: WriterRole) -> FieldGroup {
        FieldGroup {
            name: name.into(),
            element_type: ElementType::F64,
            arity,
            writer_role: role,
        }
    }

    pub fn bytes(name: &str, arity: u32, max_len: u32, role: WriterRole) -> FieldGroup {
        FieldGroup {
            name: name.into(),
            element_type: ElementType::Bytes { max_len },
            arity,
            writer_role: role,
        }
    }

    pub fn byte_size(&self) -> u64 {
        self.element_type.size() * self.arity as u64
    }

    fn validate(&self) -> Result<(), RecordError> {
        if self.name.is_empty() || self.name.len() > MAX_NAME_LEN {
            return Err(RecordError::SchemaInvalid(format!(
                "group name {:?} must be 1..={MAX_NAME_LEN} bytes",
                self.name
            )));
        }
        if !self
            .name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
        {
            return Err(RecordError::SchemaInvalid(format!(
                "group name {:?} has illegal characters",
                self.name
            )));
        }
        if self.arity == 0 {
            return Err(RecordError::SchemaInvalid(format!(
                "group {:?} arity must be >= 1",
                self.name
            )));
        }
        if let ElementType::Bytes { max_len } = self.element_type {
            if max_len == 0 {
                return Err(RecordError::SchemaInvalid(format!(
                    "group {:?} byte-string max_len must be >= 1",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Ordered list of field groups; the on-disk order is the declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordSchema {
    pub field_groups: Vec<FieldGroup>,
}

impl RecordSchema {
    pub fn new(field_groups: Vec<FieldGroup>) -> RecordSchema {
        RecordSchema { field_groups }
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        if self.field_groups.len() > MAX_GROUPS {
            return Err(RecordError::SchemaFull { max: MAX_GROUPS });
        }
        let mut seen = std::collections::HashSet::new();
        for g in &self.field_groups {
            g.validate()?;
            if !seen.insert(g.name.as_str()) {
                return Err(RecordError::SchemaInvalid(format!(
                    "duplicate group name {:?}",
                    g.name
                )));
            }
        }
        Ok(())
    }
}

/// Access level of a region handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandleRole {
    /// Snapshots only.
    ReadOnly,
    /// Snapshots plus writes to groups owned by this writer role.
    Writer(WriterRole),
    /// Snapshots plus schema maintenance; writers must be stopped.
    Maintenance,
}

impl HandleRole {
    fn label(self) -> String {
        match self {
            HandleRole::ReadOnly => "read-only".into(),
            HandleRole::Writer(WriterRole::Ingestion) => "ingestion-writer".into(),
            HandleRole::Writer(WriterRole::Feedback) => "feedback-writer".into(),
            HandleRole::Maintenance => "maintenance".into(),
        }
    }
}

/// Values written to or read from one group.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupValues {
    I64(Vec<i64>),
    F64(Vec<f64>),
    Bytes(Vec<Vec<u8>>),
}

impl GroupValues {
    pub fn len(&self) -> usize {
        match self {
            GroupValues::I64(v) => v.len(),
            GroupValues::F64(v) => v.len(),
            GroupValues::Bytes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match self {
            GroupValues::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match self {
            GroupValues::I64(v) => Some(v),
            _ => None,
        }
    }
}

/// A consistent copy of one or more groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub schema_version: u32,
    /// Global counter value (even) the snapshot was validated against.
    pub version_counter: u64,
    pub values: BTreeMap<String, GroupValues>,
}

impl Snapshot {
    pub fn group(&self, name: &str) -> Option<&GroupValues> {
        self.values.get(name)
    }
}

#[derive(Debug, Clone)]
struct GroupMeta {
    group: FieldGroup,
    index: usize,
    offset: u64,
}

/// Handle onto a region file. May be moved between threads, but a single
/// handle must not be shared: concurrent access goes through separate
/// handles (one per process or thread), which is what the on-disk atomics
/// are for.
pub struct Region {
    file: std::fs::File,
    map: MmapMut,
    path: std::path::PathBuf,
    role: HandleRole,
    schema_version: u32,
    groups: Vec<GroupMeta>,
    by_name: BTreeMap<String, usize>,
    snapshot_retries: usize,
}

// SAFETY: the mapping is plain memory; all shared mutation goes through
// atomics at 8-aligned offsets.
unsafe impl Send for Region {}

impl Region {
    /// Creates the region file, writes the schema, zero-fills every group.
    pub fn create(path: &Path, schema: &RecordSchema) -> Result<Region, RecordError> {
        schema.validate()?;
        let mut end = DATA_START;
        let mut offsets = Vec::with_capacity(schema.field_groups.len());
        for g in &schema.field_groups {
            offsets.push(end);
            end += g.byte_size();
        }
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        file.set_len(end)?;
        // SAFETY: the file is freshly sized; the mapping covers it exactly.
        let mut map = unsafe { MmapMut::map_mut(&file)? };

        map[0..4].copy_from_slice(&REGION_MAGIC);
        map[4..8].copy_from_slice(&REGION_FORMAT_VERSION.to_le_bytes());
        map[OFF_SCHEMA_VERSION..OFF_SCHEMA_VERSION + 4].copy_from_slice(&1u32.to_le_bytes());
        map[OFF_GROUP_COUNT..OFF_GROUP_COUNT + 4]
            .copy_from_slice(&(schema.field_groups.len() as u32).to_le_bytes());
        map[OFF_REGION_LENGTH..OFF_REGION_LENGTH + 8].copy_from_slice(&end.to_le_bytes());
        map[OFF_VERSION_COUNTER..OFF_VERSION_COUNTER + 8].copy_from_slice(&0u64.to_le_bytes());
        for (i, (g, off)) in schema.field_groups.iter().zip(&offsets).enumerate() {
            write_descriptor(&mut map, i, g, *off);
        }
        map.flush()?;

        let mut region = Region {
            file,
            map,
            path: path.to_path_buf(),
            role: HandleRole::Maintenance,
            schema_version: 1,
            groups: Vec::new(),
            by_name: BTreeMap::new(),
            snapshot_retries: DEFAULT_SNAPSHOT_RETRIES,
        };
        region.load_schema()?;
        Ok(region)
    }

    /// Opens an existing region for snapshots only.
    pub fn open(path: &Path) -> Result<Region, RecordError> {
        Region::open_with_role(path, HandleRole::ReadOnly)
    }

    pub fn open_writer(path: &Path, role: WriterRole) -> Result<Region, RecordError> {
        Region::open_with_role(path, HandleRole::Writer(role))
    }

    pub fn open_with_role(path: &Path, role: HandleRole) -> Result<Region, RecordError> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let len = file.metadata()?.len();
        if len < DATA_START {
            return Err(RecordError::BadMagic);
        }
        // SAFETY: mapping an existing file we just opened read-write.
        let map = unsafe { MmapMut::map_mut(&file)? };
        if map[0..4] != REGION_MAGIC {
            return Err(RecordError::BadMagic);
        }
        let format = u32::from_le_bytes(map[4..8].try_into().unwrap());
        if format != REGION_FORMAT_VERSION {
            return Err(RecordError::VersionUnsupported(format));
        }
        let mut region = Region {
            file,
            map,
            path: path.to_path_buf(),
            role,
            schema_version: 0,
            groups: Vec::new(),
            by_name: BTreeMap::new(),
            snapshot_retries: DEFAULT_SNAPSHOT_RETRIES,
        };
        region.load_schema()?;
        Ok(region)
    }

    pub fn set_snapshot_retries(&mut self, retries: usize) {
        self.snapshot_retries = retries.max(1);
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn schema_version(&self) -> u32 {
        self.schema_version
    }

    pub fn role(&self) -> HandleRole {
        self.role
    }

    /// Declared groups in on-disk order.
    pub fn schema(&self) -> Vec<FieldGroup> {
        self.groups.iter().map(|m| m.group.clone()).collect()
    }

    /// Byte offset of a group from the start of the file. Stable across
    /// schema extensions; the offset-stability tests lean on this.
    pub fn group_offset(&self, name: &str) -> Option<u64> {
        self.by_name.get(name).map(|&i| self.groups[i].offset)
    }

    pub fn global_counter(&self) -> u64 {
        self.header_counter().load(Ordering::SeqCst)
    }

    fn load_schema(&mut self) -> Result<(), RecordError> {
        let count = u32::from_le_bytes(
            self.map[OFF_GROUP_COUNT..OFF_GROUP_COUNT + 4]
                .try_into()
                .unwrap(),
        ) as usize;
        if count > MAX_GROUPS {
            return Err(RecordError::SchemaInvalid(format!(
                "group count {count} exceeds capacity"
            )));
        }
        self.schema_version = u32::from_le_bytes(
            self.map[OFF_SCHEMA_VERSION..OFF_SCHEMA_VERSION + 4]
                .try_into()
                .unwrap(),
        );
        let mut groups = Vec::with_capacity(count);
        let mut by_name = BTreeMap::new();
        for i in 0..count {
            let meta = read_descriptor(&self.map, i)?;
            by_name.insert(meta.group.name.clone(), i);
            groups.push(meta);
        }
        self.groups = groups;
        self.by_name = by_name;
        Ok(())
    }

    /// Re-reads the schema (and grows the mapping) if another handle has
    /// extended it since we last looked.
    fn refresh_if_evolved(&mut self) -> Result<(), RecordError> {
        let disk_version = u32::from_le_bytes(
            self.map[OFF_SCHEMA_VERSION..OFF_SCHEMA_VERSION + 4]
                .try_into()
                .unwrap(),
        );
        if disk_version == self.schema_version {
            return Ok(());
        }
        let disk_len = u64::from_le_bytes(
            self.map[OFF_REGION_LENGTH..OFF_REGION_LENGTH + 8]
                .try_into()
                .unwrap(),
        );
        if disk_len as usize > self.map.len() {
            // SAFETY: remapping the same file at its new length.
            self.map = unsafe { MmapMut::map_mut(&self.file)? };
        }
        self.load_schema()
    }

    fn header_counter(&self) -> &AtomicU64 {
        // SAFETY: offset 24 is 8-aligned and inside the mapping.
        unsafe { &*(self.map.as_ptr().add(OFF_VERSION_COUNTER) as *const AtomicU64) }
    }

    fn group_seq(&self, index: usize) -> &AtomicU64 {
        let off = HEADER_LEN + index * DESC_LEN + 56;
        // SAFETY: descriptor seq fields are 8-aligned and inside the mapping.
        unsafe { &*(self.map.as_ptr().add(off) as *const AtomicU64) }
    }

    fn meta(&self, name: &str) -> Result<&GroupMeta, RecordError> {
        self.by_name
            .get(name)
            .map(|&i| &self.groups[i])
            .ok_or_else(|| RecordError::UnknownGroup(name.to_string()))
    }

    // -- write path ---------------------------------------------------------

    /// Writes one group under the seqlock discipline. Returns the new value
    /// of the global version counter.
    pub fn write_group(&mut self, name: &str, values: &GroupValues) -> Result<u64, RecordError> {
        self.write_groups(&[(name, values)])
    }

    /// Writes several groups under a single global bracket, so a validated
    /// snapshot sees either all of them or none of them.
    pub fn write_groups(&mut self, entries: &[(&str, &GroupValues)]) -> Result<u64, RecordError> {
        self.refresh_if_evolved()?;
        // Validate everything before touching shared state.
        let mut staged = Vec::with_capacity(entries.len());
        for (name, values) in entries {
            let meta = self.meta(name)?;
            let owner = meta.group.writer_role;
            match self.role {
                HandleRole::Writer(r) if r == owner => {}
                _ => {
                    return Err(RecordError::RoleViolation {
                        group: name.to_string(),
                        handle: self.role.label(),
                        owner: format!("{owner:?}"),
                    })
                }
            }
            let bytes = serialize_values(&meta.group, values)?;
            staged.push((meta.index, meta.offset, bytes));
        }

        let global = self.header_counter();
        global.fetch_add(1, Ordering::SeqCst);
        for (index, offset, bytes) in &staged {
            let seq = self.group_seq(*index);
            seq.fetch_add(1, Ordering::SeqCst);
            store_chunks(&self.map, *offset as usize, bytes);
            fence(Ordering::SeqCst);
            seq.fetch_add(1, Ordering::SeqCst);
        }
        let after = global.fetch_add(1, Ordering::SeqCst) + 1;
        Ok(after)
    }

    // -- read path ----------------------------------------------------------

    /// Copies the named groups under the seq-consistency protocol: global
    /// counter even and unchanged around the copy, each group's own counter
    /// even and unchanged around its copy.
    pub fn read_snapshot(&mut self, groups: &[&str]) -> Result<Snapshot, RecordError> {
        self.refresh_if_evolved()?;
        for g in groups {
            self.meta(g)?;
        }
        let retries = self.snapshot_retries;
        let global = self.header_counter();
        for _ in 0..retries {
            let g1 = global.load(Ordering::SeqCst);
            if g1 % 2 != 0 {
                std::hint::spin_loop();
                std::thread::yield_now();
                continue;
            }
            let mut values = BTreeMap::new();
            let mut torn = false;
            for name in groups {
                let meta = self.meta(name)?;
                match self.read_group_once(meta) {
                    Some(v) => {
                        values.insert(name.to_string(), v);
                    }
                    None => {
                        torn = true;
                        break;
                    }
                }
            }
            if torn {
                std::thread::yield_now();
                continue;
            }
            fence(Ordering::SeqCst);
            if global.load(Ordering::SeqCst) == g1 {
                return Ok(Snapshot {
                    schema_version: self.schema_version,
                    version_counter: g1,
                    values,
                });
            }
            std::thread::yield_now();
        }
        Err(RecordError::ContendedTimeout { retries })
    }

    /// One attempt at a per-group consistent copy; None when the group's
    /// counter was odd or moved.
    fn read_group_once(&self, meta: &GroupMeta) -> Option<GroupValues> {
        let seq = self.group_seq(meta.index);
        let s1 = seq.load(Ordering::SeqCst);
        if s1 % 2 != 0 {
            return None;
        }
        let bytes = load_chunks(&self.map, meta.offset as usize, meta.group.byte_size() as usize);
        fence(Ordering::SeqCst);
        if seq.load(Ordering::SeqCst) != s1 {
            return None;
        }
        Some(deserialize_values(&meta.group, &bytes))
    }

    // -- schema evolution ----------------------------------------------------

    /// Appends new groups. Requires a maintenance handle and quiesced
    /// writers; existing group offsets never change.
    pub fn extend_schema(&mut self, new_groups: &[FieldGroup]) -> Result<u32, RecordError> {
        if self.role != HandleRole::Maintenance {
            return Err(RecordError::RoleViolation {
                group: new_groups
                    .first()
                    .map(|g| g.name.clone())
                    .unwrap_or_default(),
                handle: self.role.label(),
                owner: "maintenance".into(),
            });
        }
        self.refresh_if_evolved()?;
        if self.groups.len() + new_groups.len() > MAX_GROUPS {
            return Err(RecordError::SchemaFull { max: MAX_GROUPS });
        }
        for g in new_groups {
            g.validate()?;
            if self.by_name.contains_key(&g.name) {
                return Err(RecordError::NameCollision(g.name.clone()));
            }
        }
        let mut end = self
            .groups
            .iter()
            .map(|m| m.offset + m.group.byte_size())
            .max()
            .unwrap_or(DATA_START);
        let first_new = self.groups.len();
        let mut placed = Vec::with_capacity(new_groups.len());
        for g in new_groups {
            placed.push((g.clone(), end));
            end += g.byte_size();
        }
        self.file.set_len(end)?;
        // SAFETY: remapping the same file at its new length.
        self.map = unsafe { MmapMut::map_mut(&self.file)? };
        for (i, (g, off)) in placed.iter().enumerate() {
            write_descriptor(&mut self.map, first_new + i, g, *off);
        }
        self.map[OFF_REGION_LENGTH..OFF_REGION_LENGTH + 8].copy_from_slice(&end.to_le_bytes());
        let new_count = (first_new + new_groups.len()) as u32;
        self.map[OFF_GROUP_COUNT..OFF_GROUP_COUNT + 4].copy_from_slice(&new_count.to_le_bytes());
        let new_version = self.schema_version + 1;
        self.map[OFF_SCHEMA_VERSION..OFF_SCHEMA_VERSION + 4]
            .copy_from_slice(&new_version.to_le_bytes());
        self.map.flush()?;
        self.load_schema()?;
        Ok(new_version)
    }
}

// ---------------------------------------------------------------------------
// Descriptor and value encoding
// ---------------------------------------------------------------------------

fn write_descriptor(map: &mut MmapMut, index: usize, g: &FieldGroup, offset: u64) {
    let base = HEADER_LEN + index * DESC_LEN;
    let d = &mut map[base..base + DESC_LEN];
    d.fill(0);
    d[..g.name.len()].copy_from_slice(g.name.as_bytes());
    d[32] = g.element_type.code();
    d[33] = g.writer_role.code();
    d[36..40].copy_from_slice(&g.arity.to_le_bytes());
    let param = match g.element_type {
        ElementType::Bytes { max_len } => max_len,
        _ => 0,
    };
    d[40..44].copy_from_slice(&param.to_le_bytes());
    d[48..56].copy_from_slice(&offset.to_le_bytes());
    // seq at 56..64 stays zero (even: no write in progress).
}

fn read_descriptor(map: &MmapMut, index: usize) -> Result<GroupMeta, RecordError> {
    let base = HEADER_LEN + index * DESC_LEN;
    let d = &map[base..base + DESC_LEN];
    let name_end = d[..MAX_NAME_LEN].iter().position(|&b| b == 0).unwrap_or(MAX_NAME_LEN);
    let name = std::str::from_utf8(&d[..name_end])
        .map_err(|_| RecordError::SchemaInvalid(format!("descriptor {index} name not UTF-8")))?
        .to_string();
    let arity = u32::from_le_bytes(d[36..40].try_into().unwrap());
    let param = u32::from_le_bytes(d[40..44].try_into().unwrap());
    let element_type = match d[32] {
        0 => ElementType::I64,
        1 => ElementType::F64,
        2 => ElementType::Bytes { max_len: param },
        other => {
            return Err(RecordError::SchemaInvalid(format!(
                "descriptor {index} has unknown element type {other}"
            )))
        }
    };
    let writer_role = WriterRole::from_code(d[33]).ok_or_else(|| {
        RecordError::SchemaInvalid(format!("descriptor {index} has unknown writer role"))
    })?;
    let offset = u64::from_le_bytes(d[48..56].try_into().unwrap());
    Ok(GroupMeta {
        group: FieldGroup {
            name,
            element_type,
            arity,
            writer_role,
        },
        index,
        offset,
    })
}

fn serialize_values(group: &FieldGroup, values: &GroupValues) -> Result<Vec<u8>, RecordError> {
    let arity = group.arity as usize;
    if values.len() != arity {
        return Err(RecordError::ArityMismatch {
            group: group.name.clone(),
            reason: format!("expected {arity} values, got {}", values.len()),
        });
    }
    let mut out = vec![0u8; group.byte_size() as usize];
    match (group.element_type, values) {
        (ElementType::I64, GroupValues::I64(vs)) => {
            for (i, v) in vs.iter().enumerate() {
                out[i * 8..i * 8 + 8].copy_from_slice(&v.to_le_bytes());
            }
        }
        (ElementType::F64, GroupValues::F64(vs)) => {
            for (i, v) in vs.iter().enumerate() {
                out[i * 8..i * 8 + 8].copy_from_slice(&v.to_le_bytes());
            }
        }
        (ElementType::Bytes { max_len }, GroupValues::Bytes(vs)) => {
            let elem = group.element_type.size() as usize;
            for (i, v) in vs.iter().enumerate() {
                if v.len() > max_len as usize {
                    return Err(RecordError::ArityMismatch {
                        group: group.name.clone(),
                        reason: format!("element {i} is {} bytes, max is {max_len}", v.len()),
                    });
                }
                let base = i * elem;
                out[base..base + 4].copy_from_slice(&(v.len() as u32).to_le_bytes());
                out[base + 4..base + 4 + v.len()].copy_from_slice(v);
            }
        }
        _ => {
            return Err(RecordError::ArityMismatch {
                group: group.name.clone(),
                reason: "value variant does not match group element type".into(),
            })
        }
    }
    Ok(out)
}

fn deserialize_values(group: &FieldGroup, bytes: &[u8]) -> GroupValues {
    let arity = group.arity as usize;
    match group.element_type {
        ElementType::I64 => GroupValues::I64(
            (0..arity)
                .map(|i| i64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap()))
                .collect(),
        ),
        ElementType::F64 => GroupValues::F64(
            (0..arity)
                .map(|i| f64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap()))
                .collect(),
        ),
        ElementType::Bytes { max_len } => {
            let elem = group.element_type.size() as usize;
            GroupValues::Bytes(
                (0..arity)
                    .map(|i| {
                        let base = i * elem;
                        let len = u32::from_le_bytes(bytes[base..base + 4].try_into().unwrap())
                            .min(max_len) as usize;
                        bytes[base + 4..base + 4 + len].to_vec()
                    })
                    .collect(),
            )
        }
    }
}

/// Copies `bytes` into the mapping through relaxed 8-byte atomic stores so
/// concurrent readers racing the seqlock never observe a torn word.
fn store_chunks(map: &MmapMut, offset: usize, bytes: &[u8]) {
    debug_assert_eq!(offset % 8, 0);
    debug_assert_eq!(bytes.len() % 8, 0);
    for (i, chunk) in bytes.chunks_exact(8).enumerate() {
        let word = u64::from_le_bytes(chunk.try_into().unwrap());
        // SAFETY: offset is 8-aligned and in-bounds; atomics keep each word
        // race-free even while readers copy concurrently.
        let cell = unsafe { &*(map.as_ptr().add(offset + i * 8) as *const AtomicU64) };
        cell.store(word, Ordering::Relaxed);
    }
}

fn load_chunks(map: &MmapMut, offset: usize, len: usize) -> Vec<u8> {
    debug_assert_eq!(offset % 8, 0);
    debug_assert_eq!(len % 8, 0);
    let mut out = vec![0u8; len];
    for i in 0..len / 8 {
        // SAFETY: same bounds and alignment argument as store_chunks.
        let cell = unsafe { &*(map.as_ptr().add(offset + i * 8) as *const AtomicU64) };
        let word = cell.load(Ordering::Relaxed);
        out[i * 8..i * 8 + 8].copy_from_slice(&word.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("anchor-region-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(format!("{}-{}.anchor", name, std::process::id()))
    }

    fn one_group_schema() -> RecordSchema {
        RecordSchema::new(vec![FieldGroup::f64("agg", 4, WriterRole::Ingestion)])
    }

    #[test]
    fn create_zero_fills_and_sizes_exactly() {
        let path = tmp("create");
        let region = Region::create(&path, &one_group_schema()).unwrap();
        assert_eq!(
            std::fs::metadata(&path).unwrap().len(),
            DATA_START + 32,
            "header area plus one f64[4] group"
        );
        assert_eq!(region.global_counter(), 0);
        let mut ro = Region::open(&path).unwrap();
        let snap = ro.read_snapshot(&["agg"]).unwrap();
        assert_eq!(snap.version_counter, 0);
        assert_eq!(snap.group("agg").unwrap(), &GroupValues::F64(vec![0.0; 4]));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn second_handle_sees_identical_schema() {
        let path = tmp("schema-shared");
        let schema = RecordSchema::new(vec![
            FieldGroup::f64("agg", 4, WriterRole::Ingestion),
            FieldGroup::i64("meta", 2, WriterRole::Ingestion),
            FieldGroup::bytes("tag", 1, 13, WriterRole::Feedback),
        ]);
        let created = Region::create(&path, &schema).unwrap();
        let opened = Region::open(&path).unwrap();
        assert_eq!(created.schema(), opened.schema());
        assert_eq!(opened.schema_version(), 1);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn duplicate_group_names_rejected() {
        let path = tmp("dup");
        let schema = RecordSchema::new(vec![
            FieldGroup::f64("agg", 1, WriterRole::Ingestion),
            FieldGroup::i64("agg", 1, WriterRole::Ingestion),
        ]);
        assert!(matches!(
            Region::create(&path, &schema),
            Err(RecordError::SchemaInvalid(_))
        ));
    }

    #[test]
    fn open_missing_file_is_io_failure() {
        assert!(matches!(
            Region::open(Path::new("/nonexistent/r.anchor")),
            Err(RecordError::Io(_))
        ));
    }

    #[test]
    fn open_garbage_is_bad_magic() {
        let path = tmp("garbage");
        std::fs::write(&path, vec![0x55u8; DATA_START as usize + 8]).unwrap();
        assert!(matches!(Region::open(&path), Err(RecordError::BadMagic)));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn read_your_write_and_counter_parity() {
        let path = tmp("rw");
        Region::create(&path, &one_group_schema()).unwrap();
        let mut w = Region::open_writer(&path, WriterRole::Ingestion).unwrap();
        let vals = GroupValues::F64(vec![1.0, 2.0, 3.0, 4.0]);
        let counter = w.write_group("agg", &vals).unwrap();
        assert_eq!(counter, 2, "one write bumps the bracket twice");
        let snap = w.read_snapshot(&["agg"]).unwrap();
        assert_eq!(snap.group("agg").unwrap(), &vals);
        assert_eq!(snap.version_counter, 2);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn role_violation_is_rejected() {
        let path = tmp("role");
        Region::create(&path, &one_group_schema()).unwrap();
        let mut fb = Region::open_writer(&path, WriterRole::Feedback).unwrap();
        assert!(matches!(
            fb.write_group("agg", &GroupValues::F64(vec![0.0; 4])),
            Err(RecordError::RoleViolation { .. })
        ));
        let mut ro = Region::open(&path).unwrap();
        assert!(matches!(
            ro.write_group("agg", &GroupValues::F64(vec![0.0; 4])),
            Err(RecordError::RoleViolation { .. })
        ));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn arity_and_type_mismatches_are_rejected() {
        let path = tmp("arity");
        Region::create(&path, &one_group_schema()).unwrap();
        let mut w = Region::open_writer(&path, WriterRole::Ingestion).unwrap();
        assert!(matches!(
            w.write_group("agg", &GroupValues::F64(vec![0.0; 3])),
            Err(RecordError::ArityMismatch { .. })
        ));
        assert!(matches!(
            w.write_group("agg", &GroupValues::I64(vec![0; 4])),
            Err(RecordError::ArityMismatch { .. })
        ));
        assert!(matches!(
            w.write_group("nope", &GroupValues::F64(vec![])),
            Err(RecordError::UnknownGroup(_))
        ));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn held_open_write_times_out_readers() {
        let path = tmp("contended");
        Region::create(&path, &one_group_schema()).unwrap();
        let w = Region::open_writer(&path, WriterRole::Ingestion).unwrap();
        // Force the global counter odd, as if a writer died mid-write.
        w.header_counter().fetch_add(1, Ordering::SeqCst);
        let mut r = Region::open(&path).unwrap();
        r.set_snapshot_retries(8);
        assert!(matches!(
            r.read_snapshot(&["agg"]),
            Err(RecordError::ContendedTimeout { retries: 8 })
        ));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn extend_appends_without_moving_existing_groups() {
        let path = tmp("extend");
        let mut maint = Region::create(&path, &one_group_schema()).unwrap();
        let mut w = Region::open_writer(&path, WriterRole::Ingestion).unwrap();
        w.write_group("agg", &GroupValues::F64(vec![9.0, 8.0, 7.0, 6.0]))
            .unwrap();

        let old_offset = maint.group_offset("agg").unwrap();
        let v2 = maint
            .extend_schema(&[FieldGroup::i64("count", 1, WriterRole::Feedback)])
            .unwrap();
        assert_eq!(v2, 2);
        assert_eq!(maint.group_offset("agg").unwrap(), old_offset);
        assert_eq!(maint.group_offset("count").unwrap(), old_offset + 32);

        // A pre-extension handle keeps reading old groups and observes the
        // new schema version on its next access.
        let snap = w.read_snapshot(&["agg", "count"]).unwrap();
        assert_eq!(snap.schema_version, 2);
        assert_eq!(
            snap.group("agg").unwrap(),
            &GroupValues::F64(vec![9.0, 8.0, 7.0, 6.0])
        );
        assert_eq!(snap.group("count").unwrap(), &GroupValues::I64(vec![0]));

        assert!(matches!(
            maint.extend_schema(&[FieldGroup::i64("count", 1, WriterRole::Feedback)]),
            Err(RecordError::NameCollision(_))
        ));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn bytes_groups_round_trip() {
        let path = tmp("bytes");
        let schema = RecordSchema::new(vec![FieldGroup::bytes(
            "labels",
            3,
            10,
            WriterRole::Feedback,
        )]);
        Region::create(&path, &schema).unwrap();
        let mut w = Region::open_writer(&path, WriterRole::Feedback).unwrap();
        let vals = GroupValues::Bytes(vec![b"a".to_vec(), Vec::new(), b"0123456789".to_vec()]);
        w.write_group("labels", &vals).unwrap();
        assert_eq!(w.read_snapshot(&["labels"]).unwrap().group("labels").unwrap(), &vals);
        assert!(matches!(
            w.write_group(
                "labels",
                &GroupValues::Bytes(vec![b"too-long-for-ten".to_vec(), Vec::new(), Vec::new()])
            ),
            Err(RecordError::ArityMismatch { .. })
        ));
        std::fs::remove_file(&path).unwrap();
    }
}
