use crate::{Error, Result};

/// Default streaming chunk: 8 MiB of 32-bit working values per input.
pub const DEFAULT_CHUNK_BYTES: usize = 8 << 20;

/// Scheduling knobs. None of them changes any output byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    /// Worker threads; 0 means available parallelism.
    pub threads: usize,
    /// Bytes of 32-bit working values per streamed chunk.
    pub chunk_bytes: usize,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            threads: 0,
            chunk_bytes: DEFAULT_CHUNK_BYTES,
        }
    }
}

impl ExecOptions {
    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads;
        self
    }

    pub fn with_chunk_bytes(mut self, chunk_bytes: usize) -> Self {
        self.chunk_bytes = chunk_bytes;
        self
    }

    /// Elements per chunk, at least one.
    pub fn chunk_elements(&self) -> usize {
        (self.chunk_bytes / 4).max(1)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.chunk_bytes == 0 {
            return Err(Error::InvalidArgument("chunk_bytes must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn pool(&self) -> Result<rayon::ThreadPool> {
        let threads = if self.threads == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.threads
        };
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))
    }
}

/// Splits `len` elements into consecutive `(start, count)` chunks.
pub(crate) fn chunk_ranges(len: usize, chunk: usize) -> impl Iterator<Item = (usize, usize)> {
    let chunk = chunk.max(1);
    (0..len.div_ceil(chunk)).map(move |i| {
        let start = i * chunk;
        (start, chunk.min(len - start))
    })
}
