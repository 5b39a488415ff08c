use std::collections::VecDeque;

use super::AllocError;
use crate::backend::ChunkHandle;

/// Bucket of a free chunk: `min(floor(size / mmap_threshold), table_size)`.
pub fn bucket_index(chunk_size: u64, mmap_threshold: u64, table_size: usize) -> Result<usize, AllocError> {
    if chunk_size < mmap_threshold {
        return Err(AllocError::Undersized {
            size: chunk_size,
            threshold: mmap_threshold,
        });
    }
    Ok(((chunk_size / mmap_threshold).min(table_size as u64)) as usize)
}

/// First bucket whose chunks all fit `request_size`: one past the request's
/// own bucket, saturating at `table_size`.
pub fn best_fit_index(request_size: u64, mmap_threshold: u64, table_size: usize) -> Result<usize, AllocError> {
    Ok((bucket_index(request_size, mmap_threshold, table_size)? + 1).min(table_size))
}

/// Segregated free list of prefaulted large chunks.
#[derive(Debug)]
pub struct MmapPool {
    mmap_threshold: u64,
    table_size: usize,
    buckets: Vec<VecDeque<ChunkHandle>>,
    total_size: u64,
}

impl MmapPool {
    pub fn new(mmap_threshold: u64, table_size: usize) -> Self {
        MmapPool {
            mmap_threshold,
            table_size,
            buckets: vec![VecDeque::new(); table_size + 1],
            total_size: 0,
        }
    }

    pub fn total_size(&self) -> u64 {
        self.total_size
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_size == 0 && self.len() == 0
    }

    pub fn table_size(&self) -> usize {
        self.table_size
    }

    /// Free chunk count per bucket, index 0 included (always empty).
    pub fn occupancy(&self) -> Vec<usize> {
        self.buckets.iter().map(VecDeque::len).collect()
    }

    pub fn chunks(&self) -> impl Iterator<Item = (usize, &ChunkHandle)> {
        self.buckets
            .iter()
            .enumerate()
            .flat_map(|(b, q)| q.iter().map(move |c| (b, c)))
    }

    pub fn insert(&mut self, chunk: ChunkHandle) -> Result<usize, AllocError> {
        let b = bucket_index(chunk.length as u64, self.mmap_threshold, self.table_size)?;
        self.buckets[b].push_back(chunk);
        self.total_size += chunk.length as u64;
        Ok(b)
    }

    fn remove_at(&mut self, bucket: usize, pos: usize) -> ChunkHandle {
        let c = self.buckets[bucket].remove(pos).expect("position in range");
        self.total_size -= c.length as u64;
        c
    }

    /// Pops a chunk from the best-fit bucket. Only the saturated top bucket
    /// can hold chunks smaller than the request, so only it is scanned.
    pub fn take_best_fit(&mut self, request: u64) -> Result<Option<ChunkHandle>, AllocError> {
        let b = best_fit_index(request, self.mmap_threshold, self.table_size)?;
        if b < self.table_size {
            if self.buckets[b].is_empty() {
                return Ok(None);
            }
            return Ok(Some(self.remove_at(b, 0)));
        }
        let pos = self.buckets[b]
            .iter()
            .position(|c| c.length as u64 >= request);
        Ok(pos.map(|p| self.remove_at(b, p)))
    }

    fn extreme(&self, largest: bool) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize, usize)> = None;
        for (b, q) in self.buckets.iter().enumerate() {
            for (i, c) in q.iter().enumerate() {
                let better = match best {
                    None => true,
                    Some((_, _, len)) if largest => c.length > len,
                    Some((_, _, len)) => c.length < len,
                };
                if better {
                    best = Some((b, i, c.length));
                }
            }
        }
        best.map(|(b, i, _)| (b, i))
    }

    pub fn take_largest(&mut self) -> Option<ChunkHandle> {
        self.extreme(true).map(|(b, i)| self.remove_at(b, i))
    }

    pub fn take_smallest(&mut self) -> Option<ChunkHandle> {
        self.extreme(false).map(|(b, i)| self.remove_at(b, i))
    }

    pub fn drain(&mut self) -> Vec<ChunkHandle> {
        self.total_size = 0;
        self.buckets.iter_mut().flat_map(|q| q.drain(..)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const KB: u64 = 1024;
    const T: u64 = 128 * KB;

    fn chunk(base: usize, len: u64) -> ChunkHandle {
        ChunkHandle {
            base,
            length: len as usize,
            pinned: true,
        }
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(bucket_index(128 * KB, T, 8).unwrap(), 1);
        assert_eq!(bucket_index(256 * KB, T, 8).unwrap(), 2);
        assert_eq!(bucket_index(2048 * KB, T, 8).unwrap(), 8);
        assert!(bucket_index(127 * KB, T, 8).is_err());
    }

    #[test]
    fn best_fit_examples() {
        assert_eq!(best_fit_index(278 * KB, T, 8).unwrap(), 3);
        assert_eq!(best_fit_index(128 * KB, T, 8).unwrap(), 2);
        assert_eq!(best_fit_index(1024 * KB, T, 8).unwrap(), 8);
        assert!(best_fit_index(4 * KB, T, 8).is_err());
    }

    #[test]
    fn exact_size_chunk_is_not_in_best_fit_bucket() {
        let mut pool = MmapPool::new(T, 8);
        pool.insert(chunk(0x10000, 256 * KB)).unwrap();
        assert_eq!(pool.occupancy()[2], 1);
        assert_eq!(pool.take_best_fit(256 * KB).unwrap(), None);
        let c = pool.take_largest().unwrap();
        assert_eq!(c.length as u64, 256 * KB);
        assert!(pool.is_empty());
    }

    #[test]
    fn saturated_bucket_is_scanned() {
        let mut pool = MmapPool::new(T, 8);
        pool.insert(chunk(0x100000, 1024 * KB)).unwrap();
        pool.insert(chunk(0x400000, 3072 * KB)).unwrap();
        let c = pool.take_best_fit(2048 * KB).unwrap().unwrap();
        assert_eq!(c.length as u64, 3072 * KB);
        assert_eq!(pool.take_best_fit(2048 * KB).unwrap(), None);
        assert_eq!(pool.total_size(), 1024 * KB);
    }

    #[test]
    fn smallest_and_totals() {
        let mut pool = MmapPool::new(T, 8);
        for (i, len) in [512, 128, 256].into_iter().enumerate() {
            pool.insert(chunk(i << 24, len * KB)).unwrap();
        }
        assert_eq!(pool.total_size(), 896 * KB);
        assert_eq!(pool.take_smallest().unwrap().length as u64, 128 * KB);
        assert_eq!(pool.take_largest().unwrap().length as u64, 512 * KB);
        assert_eq!(pool.total_size(), 256 * KB);
    }

    proptest! {
        #[test]
        fn best_fit_bucket_chunks_fit(req in T..4096 * KB, lens in prop::collection::vec(T..4096 * KB, 1..40)) {
            let mut pool = MmapPool::new(T, 8);
            for (i, l) in lens.iter().enumerate() {
                pool.insert(chunk(i << 24, *l)).unwrap();
            }
            if let Some(c) = pool.take_best_fit(req).unwrap() {
                prop_assert!(c.length as u64 >= req);
            }
            for (b, c) in pool.chunks() {
                let len = c.length as u64;
                if b < 8 {
                    prop_assert!(b as u64 * T <= len && len < (b as u64 + 1) * T);
                } else {
                    prop_assert!(len >= 8 * T);
                }
            }
            let sum: u64 = pool.chunks().map(|(_, c)| c.length as u64).sum();
            prop_assert_eq!(sum, pool.total_size());
        }
    }
}
