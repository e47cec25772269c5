//! Text formats: XYZ (single files, directories, multi-frame), SDF V2000 and
//! the internal line-oriented format.
//!
//! Internal format grammar (one molecule per block, blocks separated by blank
//! lines, `#` starts a comment line):
//!
//! ```text
//! file     := (comment | blank | molecule)*
//! molecule := header? atom+
//! header   := ">" SP id
//! atom     := symbol SP x SP y SP z SP charge
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;

use super::{Element, MoleculeGraph};
use crate::error::{Error, Result};

/// On-disk layout accepted by [`load_molecules`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// A directory of `.xyz` files, or a single (possibly multi-frame) XYZ file.
    XyzDir,
    /// An SDF (MDL V2000) file or a directory of them.
    Sdf,
    /// The internal text format, as a single file or a directory of `.mol` files.
    Internal,
}

/// Where the integer charge feature comes from for formats without an explicit
/// per-atom integer charge column.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChargeSource {
    /// Atomic number of the element.
    #[default]
    AtomicNumber,
    /// Formal charge recorded in the file (SDF only; XYZ carries none and falls back to 0).
    Formal,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Parses a float, accepting the `*^` exponent marker found in QM9 files.
fn parse_float(token: &str) -> Option<f64> {
    let value: f64 = if token.contains("*^") {
        token.replace("*^", "e").parse().ok()?
    } else {
        token.parse().ok()?
    };
    value.is_finite().then_some(value)
}

fn element(path: &Path, line: usize, atom: usize, symbol: &str) -> Result<Element> {
    Element::from_symbol(symbol).ok_or_else(|| Error::UnknownElement {
        path: path.display().to_string(),
        line,
        atom,
        symbol: symbol.to_string(),
    })
}

fn coords_from(rows: &[[f64; 3]]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), 3), |(r, c)| rows[r][c])
}

/// Parses XYZ text. Frames follow each other; trailing non-frame lines (as in
/// QM9's frequency/SMILES footer) are ignored.
pub fn parse_xyz(text: &str, path: &Path, charges: ChargeSource) -> Result<Vec<MoleculeGraph>> {
    let lines: Vec<&str> = text.lines().collect();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "xyz".into());
    let mut molecules = Vec::new();
    let mut cursor = 0;
    loop {
        while cursor < lines.len() && lines[cursor].trim().is_empty() {
            cursor += 1;
        }
        if cursor >= lines.len() {
            break;
        }
        let count_line = lines[cursor].trim();
        let count: usize = match count_line.parse() {
            Ok(n) => n,
            Err(_) if !molecules.is_empty() => break,
            Err(_) => {
                return Err(parse_err(path, cursor + 1, format!("expected atom count, found `{count_line}`")))
            }
        };
        if count == 0 {
            return Err(parse_err(path, cursor + 1, "atom count is zero"));
        }
        let first_atom = cursor + 2;
        if first_atom + count > lines.len() {
            return Err(parse_err(path, lines.len(), format!("file ends before {count} atoms were read")));
        }
        let mut rows = Vec::with_capacity(count);
        let mut elements = Vec::with_capacity(count);
        for (atom, line_idx) in (first_atom..first_atom + count).enumerate() {
            let mut tokens = lines[line_idx].split_whitespace();
            let symbol = tokens
                .next()
                .ok_or_else(|| parse_err(path, line_idx + 1, "empty atom line"))?;
            elements.push(element(path, line_idx + 1, atom, symbol)?);
            let mut xyz = [0.0; 3];
            for slot in &mut xyz {
                let token = tokens
                    .next()
                    .ok_or_else(|| parse_err(path, line_idx + 1, "missing coordinate"))?;
                *slot = parse_float(token).ok_or_else(|| {
                    parse_err(path, line_idx + 1, format!("malformed coordinate `{token}`"))
                })?;
            }
            rows.push(xyz);
        }
        let charge_values = match charges {
            ChargeSource::AtomicNumber => elements.iter().map(|e| e.atomic_number()).collect(),
            ChargeSource::Formal => vec![0; count],
        };
        let id = if molecules.is_empty() {
            stem.clone()
        } else {
            format!("{stem}#{}", molecules.len())
        };
        molecules.push(MoleculeGraph::new(id, coords_from(&rows), elements, charge_values)?);
        cursor = first_atom + count;
    }
    if molecules.len() > 1 {
        // the first frame gets an explicit index once we know the file is multi-frame
        let first = molecules[0].clone().with_id(format!("{stem}#0"));
        molecules[0] = first;
    }
    Ok(molecules)
}

/// Parses MDL V2000 SDF text (atom block only; bonds are ignored).
pub fn parse_sdf(text: &str, path: &Path, charges: ChargeSource) -> Result<Vec<MoleculeGraph>> {
    let lines: Vec<&str> = text.lines().collect();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sdf".into());
    let mut molecules = Vec::new();
    let mut start = 0;
    while start < lines.len() {
        if lines[start..].iter().all(|l| l.trim().is_empty()) {
            break;
        }
        let counts_idx = start + 3;
        let counts = lines
            .get(counts_idx)
            .ok_or_else(|| parse_err(path, lines.len(), "record ends before the counts line"))?;
        let atom_count: usize = counts
            .get(0..3.min(counts.len()))
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| parse_err(path, counts_idx + 1, "malformed counts line"))?;
        if atom_count == 0 {
            return Err(parse_err(path, counts_idx + 1, "record has zero atoms"));
        }
        let mut rows = Vec::with_capacity(atom_count);
        let mut elements = Vec::with_capacity(atom_count);
        let mut formal = vec![0i64; atom_count];
        for atom in 0..atom_count {
            let line_idx = counts_idx + 1 + atom;
            let line = lines
                .get(line_idx)
                .ok_or_else(|| parse_err(path, lines.len(), "record ends inside the atom block"))?;
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.len() < 4 {
                return Err(parse_err(path, line_idx + 1, "atom line needs x y z symbol"));
            }
            let mut xyz = [0.0; 3];
            for (slot, token) in xyz.iter_mut().zip(&tokens[..3]) {
                *slot = parse_float(token).ok_or_else(|| {
                    parse_err(path, line_idx + 1, format!("malformed coordinate `{token}`"))
                })?;
            }
            rows.push(xyz);
            elements.push(element(path, line_idx + 1, atom, tokens[3])?);
            // old-style charge code in the atom block: 1 => +3 ... 7 => -3
            if let Some(code) = tokens.get(5).and_then(|t| t.parse::<i64>().ok()) {
                if (1..=7).contains(&code) {
                    formal[atom] = 4 - code;
                }
            }
        }
        let mut cursor = counts_idx + 1 + atom_count;
        while cursor < lines.len() && lines[cursor].trim() != "$$$$" {
            let line = lines[cursor];
            if line.starts_with("M  CHG") {
                // the property block overrides atom-block charge codes
                let tokens: Vec<&str> = line.split_whitespace().collect();
                for pair in tokens.get(3..).unwrap_or(&[]).chunks(2) {
                    if let [idx, value] = pair {
                        let idx: usize = idx
                            .parse()
                            .map_err(|_| parse_err(path, cursor + 1, "malformed M  CHG entry"))?;
                        let value: i64 = value
                            .parse()
                            .map_err(|_| parse_err(path, cursor + 1, "malformed M  CHG entry"))?;
                        if idx == 0 || idx > atom_count {
                            return Err(parse_err(path, cursor + 1, "M  CHG atom index out of range"));
                        }
                        formal[idx - 1] = value;
                    }
                }
            }
            cursor += 1;
        }
        let title = lines[start].trim();
        let id = if title.is_empty() {
            format!("{stem}#{}", molecules.len())
        } else {
            title.to_string()
        };
        let charge_values = match charges {
            ChargeSource::AtomicNumber => elements.iter().map(|e| e.atomic_number()).collect(),
            ChargeSource::Formal => formal,
        };
        molecules.push(MoleculeGraph::new(id, coords_from(&rows), elements, charge_values)?);
        start = cursor + 1;
    }
    Ok(molecules)
}

/// Parses the internal format (see module docs).
pub fn parse_internal(text: &str, path: &Path) -> Result<Vec<MoleculeGraph>> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "mol".into());
    let mut molecules = Vec::new();
    let mut id: Option<String> = None;
    let mut rows: Vec<[f64; 3]> = Vec::new();
    let mut elements = Vec::new();
    let mut charges = Vec::new();

    let mut flush = |id: &mut Option<String>,
                     rows: &mut Vec<[f64; 3]>,
                     elements: &mut Vec<Element>,
                     charges: &mut Vec<i64>,
                     line: usize|
     -> Result<()> {
        if elements.is_empty() {
            if id.is_some() {
                return Err(parse_err(path, line, "molecule header without atoms"));
            }
            return Ok(());
        }
        let name = id
            .take()
            .unwrap_or_else(|| format!("{stem}:{}", molecules.len()));
        molecules.push(MoleculeGraph::new(
            name,
            coords_from(rows),
            std::mem::take(elements),
            std::mem::take(charges),
        )?);
        rows.clear();
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            flush(&mut id, &mut rows, &mut elements, &mut charges, line_no)?;
            continue;
        }
        if let Some(rest) = line.strip_prefix('>') {
            flush(&mut id, &mut rows, &mut elements, &mut charges, line_no)?;
            let name = rest.trim();
            if name.is_empty() {
                return Err(parse_err(path, line_no, "empty molecule id"));
            }
            id = Some(name.to_string());
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 5 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected `symbol x y z charge`, found {} fields", tokens.len()),
            ));
        }
        elements.push(element(path, line_no, elements.len(), tokens[0])?);
        let mut xyz = [0.0; 3];
        for (slot, token) in xyz.iter_mut().zip(&tokens[1..4]) {
            *slot = parse_float(token)
                .ok_or_else(|| parse_err(path, line_no, format!("malformed coordinate `{token}`")))?;
        }
        rows.push(xyz);
        charges.push(
            tokens[4]
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("malformed charge `{}`", tokens[4])))?,
        );
    }
    let last = text.lines().count() + 1;
    flush(&mut id, &mut rows, &mut elements, &mut charges, last)?;
    Ok(molecules)
}

/// Writes molecules in the internal format.
pub fn write_internal<W: Write>(mut out: W, molecules: &[MoleculeGraph]) -> std::io::Result<()> {
    for mol in molecules {
        writeln!(out, "> {}", mol.id())?;
        for ((row, element), charge) in mol.coords().rows().into_iter().zip(mol.elements()).zip(mol.charges()) {
            writeln!(
                out,
                "{} {:.10} {:.10} {:.10} {}",
                element, row[0], row[1], row[2], charge
            )?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Writes molecules as consecutive XYZ frames (comment line = molecule id).
pub fn write_xyz<W: Write>(mut out: W, molecules: &[MoleculeGraph]) -> std::io::Result<()> {
    for mol in molecules {
        writeln!(out, "{}", mol.num_atoms())?;
        writeln!(out, "{}", mol.id())?;
        for (row, element) in mol.coords().rows().into_iter().zip(mol.elements()) {
            writeln!(out, "{} {:.10} {:.10} {:.10}", element, row[0], row[1], row[2])?;
        }
    }
    Ok(())
}

fn files_in(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let matches = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| extensions.iter().any(|x| x.eq_ignore_ascii_case(e)));
        if path.is_file() && matches {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn parse_file(path: &Path, format: DatasetFormat, charges: ChargeSource) -> Result<Vec<MoleculeGraph>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        DatasetFormat::XyzDir => parse_xyz(&text, path, charges),
        DatasetFormat::Sdf => parse_sdf(&text, path, charges),
        DatasetFormat::Internal => parse_internal(&text, path),
    }
}

/// Reads every molecule under `path` (a file, or a directory parsed file by
/// file in sorted order). Files are parsed in parallel; the result order is
/// deterministic.
pub fn load_molecules(
    path: &Path,
    format: DatasetFormat,
    charges: ChargeSource,
) -> Result<Vec<MoleculeGraph>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ));
    }
    let files = if path.is_dir() {
        let extensions: &[&str] = match format {
            DatasetFormat::XyzDir => &["xyz"],
            DatasetFormat::Sdf => &["sdf", "mol2d", "sd"],
            DatasetFormat::Internal => &["mol", "txt"],
        };
        files_in(path, extensions)?
    } else {
        vec![path.to_path_buf()]
    };
    let per_file: Vec<Vec<MoleculeGraph>> = files
        .par_iter()
        .map(|file| parse_file(file, format, charges))
        .collect::<Result<_>>()?;
    let molecules: Vec<MoleculeGraph> = per_file.into_iter().flatten().collect();
    if molecules.is_empty() {
        return Err(Error::EmptyDataset(format!("no molecules found under {}", path.display())));
    }
    Ok(molecules)
}
