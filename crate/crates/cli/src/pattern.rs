// SPDX-License-Identifier: MIT OR Apache-2.0

//! File-name wildcards (`*` and `?`) in the last path component.

use std::path::{Path, PathBuf};

use emprobe::{Error, Result};

/// Matches `name` against `pattern`, where `*` spans any run of characters
/// and `?` exactly one.
pub fn wildcard_match(pattern: &str, name: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let s: Vec<char> = name.chars().collect();
    let (mut i, mut j) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while j < s.len() {
        if i < p.len() && (p[i] == '?' || p[i] == s[j]) {
            i += 1;
            j += 1;
        } else if i < p.len() && p[i] == '*' {
            star = Some((i, j));
            i += 1;
        } else if let Some((si, sj)) = star {
            i = si + 1;
            j = sj + 1;
            star = Some((si, sj + 1));
        } else {
            return false;
        }
    }
    p[i..].iter().all(|c| *c == '*')
}

/// Expands a pattern to the sorted list of matching files. A pattern without
/// wildcards names a single file.
pub fn expand(pattern: &str) -> Result<Vec<PathBuf>> {
    let path = Path::new(pattern);
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("bad file pattern {pattern:?}")))?;
    if !name.contains(['*', '?']) {
        return Ok(vec![path.to_path_buf()]);
    }
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    if dir.to_string_lossy().contains(['*', '?']) {
        return Err(Error::Config("wildcards are only supported in the file name".into()));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let file_name = entry.file_name();
        let Some(n) = file_name.to_str() else { continue };
        if !n.starts_with('.') && wildcard_match(name, n) && entry.path().is_file() {
            out.push(dir.join(n));
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no files match {pattern:?}")));
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wildcard_examples() {
        assert!(wildcard_match("step_*.bin", "step_00000001.bin"));
        assert!(wildcard_match("*", ""));
        assert!(wildcard_match("a?c", "abc"));
        assert!(wildcard_match("*a*b", "xxaxxb"));
        assert!(!wildcard_match("step_*.bin", "step_1.json"));
        assert!(!wildcard_match("a?c", "ac"));
        assert!(!wildcard_match("abc", "abcd"));
    }

    #[test]
    fn expansion_is_sorted_and_skips_hidden_files() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["b.bin", "a.bin", ".a.bin.tmp1", "c.txt"] {
            std::fs::write(dir.path().join(n), b"x").unwrap();
        }
        let pat = dir.path().join("*.bin");
        let got = expand(pat.to_str().unwrap()).unwrap();
        let names: Vec<_> = got.iter().map(|p| p.file_name().unwrap().to_str().unwrap()).collect();
        assert_eq!(names, ["a.bin", "b.bin"]);
        let none = dir.path().join("*.csv");
        assert!(matches!(expand(none.to_str().unwrap()), Err(Error::Config(_))));
    }
}
