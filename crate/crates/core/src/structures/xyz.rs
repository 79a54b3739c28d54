//! Extended-XYZ reading and writing.
//!
//! Per frame: an atom-count line, a comment line of `key=value` pairs and one
//! row per atom. Recognized comment keys are `Lattice` (nine numbers, three
//! lattice vectors), `Properties` and `energy`. Recognized property columns
//! are `species`, `pos`, `forces` and `attribute`; other columns are skipped.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};

use super::{SpeciesTable, Structure};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Column {
    Species,
    Pos,
    Forces,
    Attribute,
    Skip,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Splits `a=1 b="x y" c` into key/value pairs; bare keys get an empty value.
fn comment_pairs(comment: &str, line: usize) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut chars = comment.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            break;
        }
        let mut key = String::new();
        while let Some(&c) = chars.peek() {
            if c == '=' || c.is_whitespace() {
                break;
            }
            key.push(c);
            chars.next();
        }
        let mut value = String::new();
        if chars.peek() == Some(&'=') {
            chars.next();
            if chars.peek() == Some(&'"') {
                chars.next();
                let mut closed = false;
                for c in chars.by_ref() {
                    if c == '"' {
                        closed = true;
                        break;
                    }
                    value.push(c);
                }
                if !closed {
                    return Err(parse_err(line, "unterminated quoted value"));
                }
            } else {
                while let Some(&c) = chars.peek() {
                    if c.is_whitespace() {
                        break;
                    }
                    value.push(c);
                    chars.next();
                }
            }
        }
        out.push((key, value));
    }
    Ok(out)
}

fn parse_properties(spec: &str, line: usize) -> Result<Vec<(Column, usize)>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() % 3 != 0 {
        return Err(parse_err(line, format!("malformed Properties '{spec}'")));
    }
    let mut cols = Vec::new();
    for chunk in parts.chunks(3) {
        let width: usize = chunk[2]
            .parse()
            .map_err(|_| parse_err(line, format!("bad column width '{}'", chunk[2])))?;
        let kind = match (chunk[0], chunk[1], width) {
            ("species", "S", 1) => Column::Species,
            ("pos", "R", 3) => Column::Pos,
            ("forces", "R", 3) => Column::Forces,
            ("attribute", "R", 1) => Column::Attribute,
            ("species" | "pos" | "forces" | "attribute", _, _) => {
                return Err(parse_err(
                    line,
                    format!("unexpected type for column '{}'", chunk[0]),
                ))
            }
            _ => Column::Skip,
        };
        cols.push((kind, width));
    }
    if !cols.iter().any(|c| c.0 == Column::Species) || !cols.iter().any(|c| c.0 == Column::Pos) {
        return Err(parse_err(line, "Properties must contain species and pos"));
    }
    Ok(cols)
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse()
        .map_err(|_| parse_err(line, format!("cannot parse number '{tok}'")))
}

pub fn parse_xyz(text: &str) -> Result<Vec<Structure>> {
    parse_xyz_with(text, &SpeciesTable::default())
}

pub fn parse_xyz_with(text: &str, table: &SpeciesTable) -> Result<Vec<Structure>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut frames = Vec::new();
    let mut at = 0;
    while at < lines.len() {
        if lines[at].trim().is_empty() {
            at += 1;
            continue;
        }
        let count_line = at + 1;
        let n: usize = lines[at].trim().parse().map_err(|_| {
            parse_err(
                count_line,
                format!("malformed atom count '{}'", lines[at].trim()),
            )
        })?;
        let comment_line = at + 2;
        let comment = lines
            .get(at + 1)
            .ok_or_else(|| parse_err(comment_line, "missing comment line"))?;
        let mut columns = vec![(Column::Species, 1), (Column::Pos, 3)];
        let mut cell = None;
        let mut energy = None;
        for (key, value) in comment_pairs(comment, comment_line)? {
            match key.as_str() {
                "Lattice" => {
                    let v: Vec<f64> = value
                        .split_whitespace()
                        .map(|t| parse_f64(t, comment_line))
                        .collect::<Result<_>>()?;
                    if v.len() != 9 {
                        return Err(parse_err(comment_line, "Lattice needs 9 numbers"));
                    }
                    cell = Some(Matrix3::from_row_slice(&v));
                }
                "Properties" => columns = parse_properties(&value, comment_line)?,
                "energy" => energy = Some(parse_f64(&value, comment_line)?),
                _ => {}
            }
        }
        let width: usize = columns.iter().map(|c| c.1).sum();
        let has_forces = columns.iter().any(|c| c.0 == Column::Forces);
        let has_attr = columns.iter().any(|c| c.0 == Column::Attribute);

        let mut positions = Vec::with_capacity(n);
        let mut species = Vec::with_capacity(n);
        let mut forces = Vec::new();
        let mut attribute = Vec::new();
        for k in 0..n {
            let line_no = at + 3 + k;
            let row = lines
                .get(at + 2 + k)
                .ok_or_else(|| parse_err(line_no, format!("expected {n} atom rows")))?;
            let toks: Vec<&str> = row.split_whitespace().collect();
            if toks.len() != width {
                return Err(parse_err(
                    line_no,
                    format!("expected {width} columns, found {}", toks.len()),
                ));
            }
            let mut c = 0;
            for &(kind, w) in &columns {
                let field = &toks[c..c + w];
                match kind {
                    Column::Species => species.push(table.number(field[0]).map_err(|_| {
                        parse_err(line_no, format!("unknown element '{}'", field[0]))
                    })?),
                    Column::Pos | Column::Forces => {
                        let v = Vector3::new(
                            parse_f64(field[0], line_no)?,
                            parse_f64(field[1], line_no)?,
                            parse_f64(field[2], line_no)?,
                        );
                        if kind == Column::Pos {
                            positions.push(v);
                        } else {
                            forces.push(v);
                        }
                    }
                    Column::Attribute => attribute.push(parse_f64(field[0], line_no)?),
                    Column::Skip => {}
                }
                c += w;
            }
        }
        let s = Structure {
            positions,
            species,
            attribute: has_attr.then_some(attribute),
            cell,
            energy,
            forces: has_forces.then_some(forces),
        };
        s.validate()
            .map_err(|e| parse_err(count_line, e.to_string()))?;
        frames.push(s);
        at += 2 + n;
    }
    Ok(frames)
}

/// Writes frames in extended XYZ. Numbers use the shortest representation that
/// reads back to the same `f64`.
pub fn write_xyz(frames: &[Structure], table: &SpeciesTable) -> Result<String> {
    let mut out = String::new();
    for s in frames {
        let _ = writeln!(out, "{}", s.len());
        let mut comment = Vec::new();
        if let Some(c) = &s.cell {
            let v: Vec<String> = c.transpose().iter().map(|x| x.to_string()).collect();
            comment.push(format!("Lattice=\"{}\"", v.join(" ")));
        }
        let mut props = String::from("species:S:1:pos:R:3");
        if s.forces.is_some() {
            props.push_str(":forces:R:3");
        }
        if s.attribute.is_some() {
            props.push_str(":attribute:R:1");
        }
        comment.push(format!("Properties={props}"));
        if let Some(e) = s.energy {
            comment.push(format!("energy={e}"));
        }
        if s.cell.is_some() {
            comment.push("pbc=\"T T T\"".to_string());
        }
        let _ = writeln!(out, "{}", comment.join(" "));
        for i in 0..s.len() {
            let p = s.positions[i];
            let _ = write!(
                out,
                "{} {} {} {}",
                table.symbol(s.species[i])?,
                p.x,
                p.y,
                p.z
            );
            if let Some(f) = &s.forces {
                let _ = write!(out, " {} {} {}", f[i].x, f[i].y, f[i].z);
            }
            if let Some(a) = &s.attribute {
                let _ = write!(out, " {}", a[i]);
            }
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_frame() {
        let frames = parse_xyz("1\n\nH 0 0 0\n").unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].species, vec![1]);
        assert!(frames[0].cell.is_none());
        assert!(frames[0].energy.is_none());
    }

    #[test]
    fn lattice_and_energy() {
        let text =
            "2\nLattice=\"1 0 0 0 1 0 0 0 1\" energy=-3.5 pbc=\"T T T\"\nO 0 0 0\nH 0.5 0.5 0\n";
        let s = &parse_xyz(text).unwrap()[0];
        assert_eq!(s.cell.unwrap(), Matrix3::identity());
        assert_eq!(s.energy, Some(-3.5));
    }

    #[test]
    fn forces_columns() {
        let text = "2\nProperties=species:S:1:pos:R:3:forces:R:3 energy=1\nC 0 0 0 0.1 0.2 0.3\nH 1 0 0 -0.1 -0.2 -0.3\n";
        let s = &parse_xyz(text).unwrap()[0];
        let f = s.forces.as_ref().unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[1], Vector3::new(-0.1, -0.2, -0.3));
    }

    #[test]
    fn unknown_columns_are_skipped() {
        let text = "1\nProperties=species:S:1:pos:R:3:charge:R:1\nH 0 1 2 0.7\n";
        let s = &parse_xyz(text).unwrap()[0];
        assert_eq!(s.positions[0], Vector3::new(0.0, 1.0, 2.0));
    }

    #[test]
    fn errors_carry_line_numbers() {
        match parse_xyz("x\n\nH 0 0 0\n") {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_xyz("2\n\nH 0 0 0\nQq 1 0 0\n") {
            Err(Error::Parse { line: 4, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_xyz("1\n\nH 0 0\n") {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_xyz("2\n\nH 0 0 0\n") {
            Err(Error::Parse { line: 4, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn write_then_parse_round_trip() {
        let mut s = Structure::new(
            vec![
                Vector3::new(0.1, -2.0 / 3.0, 1e-7),
                Vector3::new(1.0, 2.0, 3.0),
            ],
            vec![6, 1],
        )
        .unwrap()
        .with_cell(Matrix3::new(4.0, 0.1, 0.0, 0.0, 4.5, 0.2, 0.3, 0.0, 5.0))
        .unwrap();
        s.energy = Some(-12.345678901234567);
        s.forces = Some(vec![
            Vector3::new(0.1, 0.2, 0.3),
            Vector3::new(-1.0 / 7.0, 0.0, 1e300),
        ]);
        s.attribute = Some(vec![0.5, -0.5]);
        let table = SpeciesTable::default();
        let text = write_xyz(&[s.clone(), s.clone()], &table).unwrap();
        let back = parse_xyz(&text).unwrap();
        assert_eq!(back, vec![s.clone(), s]);
    }
}
