use crate::dataset::{load_sample, DatasetError, DatasetIndex, FundusSample, IndexEntry};

/// Random-access sample provider for training and validation.
pub trait SampleSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample_id(&self, i: usize) -> String;

    fn load(&self, i: usize) -> Result<FundusSample, DatasetError>;
}

impl SampleSource for [FundusSample] {
    fn len(&self) -> usize {
        <[FundusSample]>::len(self)
    }

    fn sample_id(&self, i: usize) -> String {
        self[i].sample_id.clone()
    }

    fn load(&self, i: usize) -> Result<FundusSample, DatasetError> {
        Ok(self[i].clone())
    }
}

impl SampleSource for Vec<FundusSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample_id(&self, i: usize) -> String {
        self[i].sample_id.clone()
    }

    fn load(&self, i: usize) -> Result<FundusSample, DatasetError> {
        Ok(self[i].clone())
    }
}

/// Reads samples from disk on demand.
#[derive(Clone, Debug)]
pub struct IndexSource {
    entries: Vec<IndexEntry>,
}

impl IndexSource {
    pub fn new(index: &DatasetIndex) -> Self {
        Self {
            entries: index.entries.clone(),
        }
    }

    pub fn truncated(mut self, limit: Option<usize>) -> Self {
        if let Some(n) = limit {
            self.entries.truncate(n);
        }
        self
    }
}

impl SampleSource for IndexSource {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn sample_id(&self, i: usize) -> String {
        self.entries[i].sample_id.clone()
    }

    fn load(&self, i: usize) -> Result<FundusSample, DatasetError> {
        load_sample(&self.entries[i])
    }
}
