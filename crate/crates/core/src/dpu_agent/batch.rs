use crate::fabric::{ClientId, EndpointId, RegisteredRegion};

/// Byte range of one write-back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteSpan {
    pub region_id: u16,
    pub offset: u64,
    pub len: u64,
}

/// One server write covering `members` (indices into the input), in
/// ascending offset order. `superseded` were overwritten by a later write to
/// the same bytes in the same batch; they are acknowledged with the run.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WriteRun {
    pub members: Vec<usize>,
    pub superseded: Vec<usize>,
}

/// Merge byte-adjacent write-backs of the same region into runs. A later
/// write to the same offset replaces an earlier one.
pub fn coalesce(spans: &[WriteSpan]) -> Vec<WriteRun> {
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by_key(|&i| (spans[i].region_id, spans[i].offset, i));
    let mut runs: Vec<WriteRun> = Vec::new();
    let mut prev: Option<usize> = None;
    for i in order {
        let s = spans[i];
        match prev.map(|p| (p, spans[p])) {
            Some((p, ps)) if ps.region_id == s.region_id && ps.offset == s.offset => {
                let run = runs.last_mut().expect("open run");
                run.members.pop();
                run.members.push(i);
                run.superseded.push(p);
            }
            Some((_, ps)) if ps.region_id == s.region_id && ps.offset + ps.len == s.offset => {
                runs.last_mut().expect("open run").members.push(i);
            }
            _ => runs.push(WriteRun { members: vec![i], superseded: Vec::new() }),
        }
        prev = Some(i);
    }
    runs
}

/// A read accepted by stage A.
#[derive(Debug, Clone, Copy)]
pub struct ReadTask {
    pub sender: EndpointId,
    pub client: ClientId,
    pub dest_addr: u64,
    pub chunk_word: u64,
    pub region: RegisteredRegion,
    pub offset: u64,
    pub size: u32,
}

/// A write-back accepted by stage A.
#[derive(Debug, Clone)]
pub struct WriteTask {
    pub sender: EndpointId,
    pub client: ClientId,
    pub chunk_word: u64,
    pub region: RegisteredRegion,
    pub region_id: u16,
    pub offset: u64,
    pub data: Vec<u8>,
}

/// Requests drained together from the receive queue.
#[derive(Debug, Default)]
pub struct TaskBatch {
    pub reads: Vec<ReadTask>,
    pub writes: Vec<WriteTask>,
}

impl TaskBatch {
    pub fn len(&self) -> usize {
        self.reads.len() + self.writes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
