//! JSON-lines corpora: one `{id, subtask, prompt, completion}` object per line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use less_core::Example;

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let mut out =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push(ex);
    }
    let mut ids: Vec<u64> = out.iter().map(|e| e.id).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        bail!("{}: duplicate example id {}", path.display(), w[0]);
    }
    Ok(out)
}

/// Groups labelled examples by subtask, ascending by label. Unlabelled
/// examples are an error.
pub fn group_by_subtask(examples: &[Example]) -> Result<Vec<Vec<Example>>> {
    let mut groups: BTreeMap<u32, Vec<Example>> = BTreeMap::new();
    for ex in examples {
        let Some(label) = ex.subtask else {
            bail!("validation example {} has no subtask label", ex.id);
        };
        groups.entry(label).or_default().push(ex.clone());
    }
    Ok(groups.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_grouping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let exs = vec![
            Example::new(3, Some(5), vec![1], vec![2]),
            Example::new(1, Some(2), vec![], vec![4, 4]),
            Example::new(2, Some(5), vec![7], vec![7]),
        ];
        write_jsonl(&path, &exs).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, exs);
        let g = group_by_subtask(&back).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0][0].id, 1);
        assert_eq!(g[1].iter().map(|e| e.id).collect::<Vec<_>>(), vec![3, 2]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let ex = Example::new(3, None, vec![1], vec![2]);
        write_jsonl(&path, &[ex.clone(), ex]).unwrap();
        assert!(read_jsonl(&path).is_err());
    }
}
