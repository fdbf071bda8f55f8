//! Resolves data references to datasets.

use std::path::PathBuf;

use hvae_core::datasets::{load_idx, named_paths, synthesize, Dataset, Generator, DATA_ROOT_ENV};

use crate::config::DataRef;
use crate::error::CliError;

pub fn load(r: &DataRef) -> Result<Dataset, CliError> {
    r.validate()?;
    let mut ds = if let Some(images) = &r.images {
        load_idx(images, r.labels.as_deref())?
    } else if let Some(name) = &r.dataset {
        let root = std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Config(format!("dataset `{name}` needs {DATA_ROOT_ENV} to be set")))?;
        let (images, labels) = named_paths(&root, name, r.split.as_deref().unwrap_or("test"))?;
        load_idx(&images, labels.as_deref())?
    } else {
        let s = r.synthetic.as_ref().expect("validated");
        let generator: Generator = s.generator.parse()?;
        synthesize(generator, s.shape, s.n, s.seed)?
    };
    ds.name = r.label();
    Ok(ds)
}
