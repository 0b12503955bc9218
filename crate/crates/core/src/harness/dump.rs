//! Binary feature dumps, one file per encoder stage.
//!
//! Little-endian layout: magic `RSEFDMP1`, `u32` version, `u32` dimension, `u64` record
//! count, then per record `u32` class id, `u32` task of origin, `u8` split (0 train,
//! 1 test) and `d` `f32` components. Train records precede test records.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DVector;

use crate::error::{DumpError, Error, Result};
use crate::prototypes::{ClassId, FeatureRecord, TaskId};
use crate::scenario::{SplitKind, StageFeatures, StagedScenario};

pub const MAGIC: [u8; 8] = *b"RSEFDMP1";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train = 0,
    Test = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpHeader {
    pub version: u32,
    pub dim: u32,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpRecord {
    pub split: Split,
    pub record: FeatureRecord,
}

/// Writes one stage; vectors are stored as `f32`.
pub fn write_stage(path: &Path, stage: &StageFeatures) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_stage_to(&mut w, stage).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_stage_to(w: &mut impl Write, stage: &StageFeatures) -> std::io::Result<()> {
    let dim = stage.train.first().or(stage.test.first()).map_or(0, |r| r.dim());
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&((stage.train.len() + stage.test.len()) as u64).to_le_bytes())?;
    for (split, records) in [(Split::Train, &stage.train), (Split::Test, &stage.test)] {
        for r in records {
            w.write_all(&r.class_id.to_le_bytes())?;
            w.write_all(&r.task_id.to_le_bytes())?;
            w.write_all(&[split as u8])?;
            for v in r.vector.iter() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Streaming reader that validates each record as it is read.
pub struct DumpReader<R: Read> {
    inner: R,
    header: DumpHeader,
    offset: u64,
    read: u64,
    seen_test: bool,
    done: bool,
}

impl DumpReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufReader::new(file))
    }
}

fn read_full(r: &mut impl Read, buf: &mut [u8], offset: u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(DumpError::Truncated {
                    offset: offset + filled as u64,
                    needed: (buf.len() - filled) as u64,
                }
                .into())
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io("<dump stream>", e)),
        }
    }
    Ok(())
}

impl<R: Read> DumpReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut head = [0u8; HEADER_LEN as usize];
        read_full(&mut inner, &mut head[..8], 0)?;
        let magic: [u8; 8] = head[..8].try_into().expect("8 bytes");
        if magic != MAGIC {
            return Err(DumpError::BadMagic { found: magic }.into());
        }
        read_full(&mut inner, &mut head[8..], 8)?;
        let version = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(DumpError::UnsupportedVersion(version).into());
        }
        let dim = u32::from_le_bytes(head[12..16].try_into().expect("4 bytes"));
        if dim == 0 {
            return Err(DumpError::Dimension { expected: 1, found: 0 }.into());
        }
        let count = u64::from_le_bytes(head[16..24].try_into().expect("8 bytes"));
        Ok(Self {
            inner,
            header: DumpHeader { version, dim, count },
            offset: HEADER_LEN,
            read: 0,
            seen_test: false,
            done: false,
        })
    }

    pub fn header(&self) -> DumpHeader {
        self.header
    }

    fn next_record(&mut self) -> Result<Option<DumpRecord>> {
        if self.read == self.header.count {
            let mut probe = [0u8; 1];
            return match self.inner.read(&mut probe) {
                Ok(0) => Ok(None),
                Ok(_) => Err(DumpError::TrailingBytes { offset: self.offset }.into()),
                Err(e) => Err(Error::io("<dump stream>", e)),
            };
        }
        let index = self.read;
        let start = self.offset;
        let d = self.header.dim as usize;
        let mut buf = vec![0u8; 9 + 4 * d];
        read_full(&mut self.inner, &mut buf, start)?;
        let class_id = u32::from_le_bytes(buf[0..4].try_into().expect("4 bytes"));
        let task_id = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
        let split = match buf[8] {
            0 => Split::Train,
            1 => Split::Test,
            tag => return Err(DumpError::BadSplit { record: index, tag }.into()),
        };
        if split == Split::Train && self.seen_test {
            return Err(DumpError::Inconsistent {
                record: index,
                reason: "train record after test records".into(),
            }
            .into());
        }
        self.seen_test |= split == Split::Test;
        let mut values = Vec::with_capacity(d);
        for (k, chunk) in buf[9..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(DumpError::NonFinite {
                    record: index,
                    offset: start + 9 + 4 * k as u64,
                }
                .into());
            }
            values.push(v as f64);
        }
        self.offset += buf.len() as u64;
        self.read += 1;
        let record = FeatureRecord::new(DVector::from_vec(values), class_id, task_id)?;
        Ok(Some(DumpRecord { split, record }))
    }
}

impl<R: Read> Iterator for DumpReader<R> {
    type Item = Result<DumpRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let out = self.next_record().transpose();
        if !matches!(out, Some(Ok(_))) {
            self.done = true;
        }
        out
    }
}

/// Summary of a validated dump.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpSummary {
    pub header: DumpHeader,
    pub train: usize,
    pub test: usize,
    pub classes_per_task: BTreeMap<TaskId, BTreeSet<ClassId>>,
}

/// Reads a whole stage and checks that every class belongs to exactly one task.
pub fn read_stage(path: &Path) -> Result<(StageFeatures, DumpSummary)> {
    let mut reader = DumpReader::open(path)?;
    let header = reader.header();
    let mut stage = StageFeatures {
        train: Vec::new(),
        test: Vec::new(),
    };
    let mut class_task: BTreeMap<ClassId, TaskId> = BTreeMap::new();
    for (index, item) in reader.by_ref().enumerate() {
        let DumpRecord { split, record } = item?;
        let task = *class_task.entry(record.class_id).or_insert(record.task_id);
        if task != record.task_id {
            return Err(DumpError::Inconsistent {
                record: index as u64,
                reason: format!(
                    "class {} appears with tasks {task} and {}",
                    record.class_id, record.task_id
                ),
            }
            .into());
        }
        match split {
            Split::Train => stage.train.push(record),
            Split::Test => stage.test.push(record),
        }
    }
    let mut classes_per_task: BTreeMap<TaskId, BTreeSet<ClassId>> = BTreeMap::new();
    for (c, t) in class_task {
        classes_per_task.entry(t).or_default().insert(c);
    }
    let summary = DumpSummary {
        header,
        train: stage.train.len(),
        test: stage.test.len(),
        classes_per_task,
    };
    Ok((stage, summary))
}

/// Loads one dump per stage (stage order = path order) into a scenario.
pub fn read_scenario(paths: &[impl AsRef<Path>], split: SplitKind) -> Result<StagedScenario> {
    if paths.is_empty() {
        return Err(Error::Empty("dump paths"));
    }
    let mut stages = Vec::with_capacity(paths.len());
    let mut tasks = None;
    for (s, path) in paths.iter().enumerate() {
        let (stage, summary) = read_stage(path.as_ref())?;
        let expected: Vec<TaskId> = (1..=paths.len() as TaskId).collect();
        let found: Vec<TaskId> = summary.classes_per_task.keys().copied().collect();
        if found != expected {
            return Err(Error::Invalid(format!(
                "stage {} dump covers tasks {found:?}, expected {expected:?}",
                s + 1
            )));
        }
        tasks.get_or_insert(summary.classes_per_task);
        stages.push(stage);
    }
    let tasks = tasks.expect("at least one stage").into_values().collect();
    StagedScenario::new(tasks, stages, split)
}

/// Writes `stage_{t}.fdump` for every stage into `dir` and returns the paths.
pub fn write_scenario(dir: &Path, scenario: &StagedScenario) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    scenario
        .stages()
        .iter()
        .enumerate()
        .map(|(i, stage)| {
            let path = dir.join(format!("stage_{}.fdump", i + 1));
            write_stage(&path, stage)?;
            Ok(path)
        })
        .collect()
}
