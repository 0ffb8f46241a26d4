//! Temporal ensembling of overlapping action chunks at control time.
//!
//! Every control tick may push a freshly predicted chunk; the action actually
//! issued at tick `t` is a weighted average of the rows that all retained
//! chunks assign to `t`, with exponentially decaying weight in the age of the
//! issuing prediction.

use thiserror::Error;

use crate::policy::ActionChunk;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("push at t={t} violates monotonicity (last push at t={last})")]
    NonMonotonicPush { t: i64, last: i64 },
    #[error("chunk horizon {got} does not match buffer horizon {expected}")]
    HorizonMismatch { expected: usize, got: usize },
    #[error("no retained chunk covers timestep {0}")]
    Empty(i64),
}

#[derive(Clone, Debug)]
struct Record {
    issue_timestep: i64,
    chunk: ActionChunk,
}

/// Ring of (issue timestep, chunk) records covering the current tick.
#[derive(Clone, Debug)]
pub struct EnsembleBuffer {
    records: Vec<Record>,
    horizon: usize,
    decay: f64,
    last_push: Option<i64>,
}

impl EnsembleBuffer {
    /// `horizon` is the chunk length k; `decay` the exponential weight rate m.
    pub fn new(horizon: usize, decay: f64) -> Self {
        assert!(horizon >= 1, "chunk horizon must be at least 1");
        assert!(decay >= 0.0, "decay must be non-negative");
        EnsembleBuffer {
            records: Vec::new(),
            horizon,
            decay,
            last_push: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Append a chunk issued at `t` and evict records that no longer cover
    /// `t`: a record issued at `s` covers timesteps s..s+k-1, so everything
    /// with s < t-k+1 is dropped.
    pub fn push_chunk(&mut self, t: i64, chunk: ActionChunk) -> Result<(), EnsembleError> {
        if let Some(last) = self.last_push {
            if t <= last {
                return Err(EnsembleError::NonMonotonicPush { t, last });
            }
        }
        if chunk.horizon() != self.horizon {
            return Err(EnsembleError::HorizonMismatch {
                expected: self.horizon,
                got: chunk.horizon(),
            });
        }
        self.last_push = Some(t);
        self.records.push(Record {
            issue_timestep: t,
            chunk,
        });
        let cutoff = t - self.horizon as i64 + 1;
        self.records.retain(|r| r.issue_timestep >= cutoff);
        Ok(())
    }

    /// Weighted average of the rows covering `t`: w_i = exp(-m * age_i) with
    /// age_i = t - issue_i, normalized to sum to one.
    pub fn ensemble_action(&self, t: i64) -> Result<Vec<f64>, EnsembleError> {
        let mut weight_sum = 0.0;
        let mut acc: Option<Vec<f64>> = None;
        for r in &self.records {
            let offset = t - r.issue_timestep;
            if offset < 0 || offset >= self.horizon as i64 {
                continue;
            }
            let w = (-self.decay * offset as f64).exp();
            let row = r.chunk.row(offset as usize);
            match &mut acc {
                Some(a) => {
                    for (ai, &ri) in a.iter_mut().zip(row.iter()) {
                        *ai += w * ri;
                    }
                }
                None => acc = Some(row.iter().map(|&v| w * v).collect()),
            }
            weight_sum += w;
        }
        match acc {
            Some(mut a) => {
                for v in a.iter_mut() {
                    *v /= weight_sum;
                }
                Ok(a)
            }
            None => Err(EnsembleError::Empty(t)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ActionChunk, ArmScope};

    fn chunk_with(k: usize, dims: usize, f: impl Fn(usize, usize) -> f64) -> ActionChunk {
        let mut data = vec![0.0; k * dims];
        for r in 0..k {
            for c in 0..dims {
                data[r * dims + c] = f(r, c);
            }
        }
        ActionChunk::new(k, dims, ArmScope::Both, data).unwrap()
    }

    #[test]
    fn push_grows_then_evicts() {
        let mut buf = EnsembleBuffer::new(20, 0.01);
        buf.push_chunk(0, chunk_with(20, 2, |_, _| 0.0)).unwrap();
        assert_eq!(buf.len(), 1);
        let mut buf = EnsembleBuffer::new(20, 0.01);
        for t in 0..25 {
            buf.push_chunk(t, chunk_with(20, 2, |_, _| t as f64)).unwrap();
        }
        assert_eq!(buf.len(), 20);
    }

    #[test]
    fn eviction_boundary_is_exact() {
        // brute-force buffer simulation: at query time t, retained issue
        // timesteps are exactly [t-k+1, t]
        let k = 5;
        let mut buf = EnsembleBuffer::new(k, 0.0);
        for t in 0..10i64 {
            buf.push_chunk(t, chunk_with(k, 1, |r, _| (t + r as i64) as f64))
                .unwrap();
            let issues: Vec<i64> = buf.records.iter().map(|r| r.issue_timestep).collect();
            let expected: Vec<i64> = ((t - k as i64 + 1).max(0)..=t).collect();
            assert_eq!(issues, expected);
        }
        // record issued at t-k absent, t-k+1 present
        let t = 9i64;
        assert!(buf.records.iter().all(|r| r.issue_timestep != t - k as i64));
        assert!(buf
            .records
            .iter()
            .any(|r| r.issue_timestep == t - k as i64 + 1));
    }

    #[test]
    fn non_monotone_push_rejected() {
        let mut buf = EnsembleBuffer::new(3, 0.0);
        buf.push_chunk(4, chunk_with(3, 1, |_, _| 1.0)).unwrap();
        assert!(matches!(
            buf.push_chunk(4, chunk_with(3, 1, |_, _| 1.0)),
            Err(EnsembleError::NonMonotonicPush { .. })
        ));
    }

    #[test]
    fn identical_chunks_return_the_covering_row() {
        let k = 4;
        let mut buf = EnsembleBuffer::new(k, 0.7);
        // same chunk CONTENT at each issue time, offset so that each push
        // assigns the same values to absolute timesteps
        for t in 0..4i64 {
            buf.push_chunk(t, chunk_with(k, 2, |r, c| (t + r as i64) as f64 * 10.0 + c as f64))
                .unwrap();
        }
        let a = buf.ensemble_action(3).unwrap();
        assert!((a[0] - 30.0).abs() < 1e-12);
        assert!((a[1] - 31.0).abs() < 1e-12);
    }

    #[test]
    fn zero_decay_averages_plainly() {
        let mut buf = EnsembleBuffer::new(3, 0.0);
        buf.push_chunk(0, chunk_with(3, 1, |_, _| 3.0)).unwrap();
        buf.push_chunk(1, chunk_with(3, 1, |_, _| 6.0)).unwrap();
        buf.push_chunk(2, chunk_with(3, 1, |_, _| 9.0)).unwrap();
        let a = buf.ensemble_action(2).unwrap();
        assert!((a[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_sum_matches_direct_oracle() {
        let k = 3;
        let m = 0.5;
        let mut buf = EnsembleBuffer::new(k, m);
        let chunks = [
            chunk_with(k, 2, |r, c| 1.0 + r as f64 * 0.5 + c as f64),
            chunk_with(k, 2, |r, c| -2.0 + r as f64 * 0.25 - c as f64),
            chunk_with(k, 2, |r, c| 0.75 * r as f64 + 0.1 * c as f64),
        ];
        for (t, c) in chunks.iter().enumerate() {
            buf.push_chunk(t as i64, c.clone()).unwrap();
        }
        let t = 2i64;
        let got = buf.ensemble_action(t).unwrap();
        // independent scalar computation
        for dim in 0..2 {
            let mut num = 0.0;
            let mut den = 0.0;
            for (issue, c) in chunks.iter().enumerate() {
                let age = (t - issue as i64) as f64;
                let w = (-m * age).exp();
                num += w * c.row((t - issue as i64) as usize)[dim];
                den += w;
            }
            assert!((got[dim] - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_buffer_errors() {
        let buf = EnsembleBuffer::new(3, 0.0);
        assert!(matches!(buf.ensemble_action(0), Err(EnsembleError::Empty(0))));
    }

    #[test]
    fn open_loop_playback_when_repredicting_only_on_empty() {
        // chunk interval = k degenerates to open-loop playback of each chunk
        let k = 4;
        let mut buf = EnsembleBuffer::new(k, 0.3);
        let c0 = chunk_with(k, 1, |r, _| r as f64);
        buf.push_chunk(0, c0.clone()).unwrap();
        for t in 0..k as i64 {
            let a = buf.ensemble_action(t).unwrap();
            assert!((a[0] - c0.row(t as usize)[0]).abs() < 1e-12);
        }
        let c1 = chunk_with(k, 1, |r, _| 100.0 + r as f64);
        buf.push_chunk(k as i64, c1.clone()).unwrap();
        // c0 no longer covers t=k, so playback continues from c1 alone
        assert_eq!(buf.len(), 1);
        for t in 0..k as i64 {
            let a = buf.ensemble_action(k as i64 + t).unwrap();
            assert!((a[0] - c1.row(t as usize)[0]).abs() < 1e-12);
        }
    }
}
