use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chn_tensor::{Scalar, Tensor};
use log::warn;
use rand::Rng;

use super::vocab::Vocabulary;
use crate::error::{ChnError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingReport {
    /// Vocabulary rows copied from the file.
    pub found: usize,
    pub coverage: f64,
    pub skipped_lines: usize,
}

/// Reads a GloVe-style text file (`token v1 .. v_dim` per line) into a
/// `|V| x dim` table. Rows for tokens absent from the file, including the
/// reserved ones, are drawn from `uniform(-0.1, 0.1)`.
///
/// Lines with unparsable numbers are skipped with a warning; a line whose
/// numbers parse but have the wrong count is an error.
pub fn load_embeddings<T: Scalar, R: Rng + ?Sized>(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut R,
) -> Result<(Tensor<T>, EmbeddingReport)> {
    let mut table = Tensor::<T>::uniform(&[vocab.len(), dim], -0.1, 0.1, rng);
    let mut filled = vec![false; vocab.len()];
    let mut report = EmbeddingReport {
        found: 0,
        coverage: 0.0,
        skipped_lines: 0,
    };
    let file = File::open(path).map_err(|e| ChnError::io(path, e))?;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ChnError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.trim_end().split(' ');
        let token = parts.next().unwrap_or_default();
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let Ok(values) = values else {
            warn!("{}:{}: unparsable embedding line skipped", path.display(), lineno + 1);
            report.skipped_lines += 1;
            continue;
        };
        if values.len() != dim {
            return Err(ChnError::EmbeddingDim {
                path: path.to_path_buf(),
                line: lineno + 1,
                expected: dim,
                found: values.len(),
            });
        }
        let id = vocab.encode(token) as usize;
        if vocab.decode(id as u32) != Some(token) || filled[id] {
            continue;
        }
        for (j, v) in values.into_iter().enumerate() {
            table.set(id, j, T::lit(v));
        }
        filled[id] = true;
        report.found += 1;
    }
    report.coverage = report.found as f64 / vocab.len() as f64;
    Ok((table, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn vocab() -> Vocabulary {
        Vocabulary::build(vec![vec!["cat", "dog", "cat", "emu"]], 10).unwrap()
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn copies_rows_exactly() {
        let f = write("dog 0.5 -1.25 3\nzebra 1 1 1\ncat 0.125 0.25 0.375\n");
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (t, report) = load_embeddings::<f64, _>(f.path(), &v, 3, &mut rng).unwrap();
        let cat = v.encode("cat") as usize;
        let dog = v.encode("dog") as usize;
        assert_eq!(&t.data()[cat * 3..cat * 3 + 3], &[0.125, 0.25, 0.375]);
        assert_eq!(&t.data()[dog * 3..dog * 3 + 3], &[0.5, -1.25, 3.0]);
        assert_eq!(report.found, 2);
        assert!((report.coverage - 2.0 / 6.0).abs() < 1e-15);
        let emu = v.encode("emu") as usize;
        assert!(t.data()[emu * 3..emu * 3 + 3].iter().all(|x| x.abs() < 0.1));
    }

    #[test]
    fn empty_file_is_all_random() {
        let f = write("");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (t, report) = load_embeddings::<f64, _>(f.path(), &vocab(), 4, &mut rng).unwrap();
        assert_eq!(report.coverage, 0.0);
        assert_eq!(t.shape(), &[6, 4]);
    }

    #[test]
    fn malformed_skipped_but_wrong_dim_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = write(". . . 0.1 0.2\ncat 1 2\n");
        let (_, report) = load_embeddings::<f64, _>(f.path(), &vocab(), 2, &mut rng).unwrap();
        assert_eq!(report.skipped_lines, 1);
        assert_eq!(report.found, 1);
        let f = write("cat 1 2 3\n");
        assert!(matches!(
            load_embeddings::<f64, _>(f.path(), &vocab(), 2, &mut rng),
            Err(ChnError::EmbeddingDim { found: 3, .. })
        ));
    }
}
