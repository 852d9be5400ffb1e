//! Theater geometry and its plain-text file format.
//!
//! ```text
//! <rows> <cols>
//! <rows lines of <cols> characters: 'S' seat, '.' aisle, '#' wall, '1'..'9' exit>
//! blocks
//! <letter> <r0>-<r1> <c0>-<c1>      one inclusive rectangle per line
//! ```
//!
//! Every seat must fall inside exactly one block rectangle.

use std::fmt::Write as _;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::SimError;

const DEFAULT_LAYOUT: &str = include_str!("../../resources/default_layout.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Wall,
    Aisle,
    Seat,
    Exit(u8),
}

impl CellKind {
    pub fn walkable(self) -> bool {
        !matches!(self, CellKind::Wall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Exit {
    pub id: u8,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct BlockRect {
    letter: char,
    rows: (usize, usize),
    cols: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TheaterLayout {
    rows: usize,
    cols: usize,
    cells: Vec<CellKind>,
    /// Cell index of every seat, row-major. Seat `i` is covariate `x_i`.
    seats: Vec<usize>,
    seat_of_cell: Vec<Option<usize>>,
    block_of_seat: Vec<u8>,
    block_letters: Vec<char>,
    rects: Vec<BlockRect>,
    /// Sorted by id.
    exits: Vec<Exit>,
}

impl TheaterLayout {
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let bad = |line: usize, msg: String| SimError::LayoutParse { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
        let (hl, header) = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(hl, format!("bad dimensions: {e}")))?;
        let [rows, cols] = dims[..] else {
            return Err(bad(hl, "header must be `<rows> <cols>`".into()));
        };
        if rows == 0 || cols == 0 {
            return Err(bad(hl, "dimensions must be positive".into()));
        }
        let mut cells = Vec::with_capacity(rows * cols);
        let mut exits = Vec::new();
        for r in 0..rows {
            let (ln, line) = lines.next().ok_or_else(|| bad(hl + r + 1, "missing grid row".into()))?;
            if line.chars().count() != cols {
                return Err(bad(ln, format!("expected {cols} cells, found {}", line.chars().count())));
            }
            for (c, ch) in line.chars().enumerate() {
                let kind = match ch {
                    'S' => CellKind::Seat,
                    '.' => CellKind::Aisle,
                    '#' => CellKind::Wall,
                    '1'..='9' => {
                        let id = ch as u8 - b'0';
                        if r != 0 && c != 0 && r != rows - 1 && c != cols - 1 {
                            return Err(bad(ln, format!("exit {id} is not on the boundary")));
                        }
                        exits.push(Exit { id, row: r, col: c });
                        CellKind::Exit(id)
                    }
                    other => return Err(bad(ln, format!("unknown cell character {other:?}"))),
                };
                cells.push(kind);
            }
        }
        exits.sort_by_key(|e| e.id);
        for (i, e) in exits.iter().enumerate() {
            if e.id as usize != i + 1 {
                return Err(bad(hl, format!("exit ids must be 1..={} without gaps or repeats", exits.len())));
            }
        }
        if exits.is_empty() {
            return Err(bad(hl, "layout has no exits".into()));
        }

        let (bl, tag) = lines.next().ok_or_else(|| bad(hl + rows + 1, "missing `blocks` section".into()))?;
        if tag.trim() != "blocks" {
            return Err(bad(bl, "expected `blocks`".into()));
        }
        let mut rects = Vec::new();
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            rects.push(parse_rect(line).map_err(|m| bad(ln, m))?);
        }

        let mut seats = Vec::new();
        let mut seat_of_cell = vec![None; cells.len()];
        for (idx, kind) in cells.iter().enumerate() {
            if *kind == CellKind::Seat {
                seat_of_cell[idx] = Some(seats.len());
                seats.push(idx);
            }
        }
        let mut block_letters: Vec<char> = rects.iter().map(|r| r.letter).collect();
        block_letters.sort_unstable();
        block_letters.dedup();
        let mut block_of_seat = Vec::with_capacity(seats.len());
        for &cell in &seats {
            let (r, c) = (cell / cols, cell % cols);
            let hits: Vec<&BlockRect> = rects
                .iter()
                .filter(|b| (b.rows.0..=b.rows.1).contains(&r) && (b.cols.0..=b.cols.1).contains(&c))
                .collect();
            match hits[..] {
                [one] => {
                    let id = block_letters.iter().position(|&l| l == one.letter).expect("letter listed");
                    block_of_seat.push(id as u8);
                }
                [] => return Err(SimError::InvalidLayout(format!("seat ({r}, {c}) belongs to no block"))),
                _ => return Err(SimError::InvalidLayout(format!("seat ({r}, {c}) belongs to several blocks"))),
            }
        }
        Ok(Self { rows, cols, cells, seats, seat_of_cell, block_of_seat, block_letters, rects, exits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell(&self, row: usize, col: usize) -> CellKind {
        self.cells[row * self.cols + col]
    }

    pub fn cells(&self) -> &[CellKind] {
        &self.cells
    }

    pub fn seat_count(&self) -> usize {
        self.seats.len()
    }

    /// Row-major cell index of seat `i`.
    pub fn seat_cell(&self, seat: usize) -> usize {
        self.seats[seat]
    }

    pub fn seat_position(&self, seat: usize) -> (usize, usize) {
        let cell = self.seats[seat];
        (cell / self.cols, cell % self.cols)
    }

    pub fn seat_at(&self, row: usize, col: usize) -> Option<usize> {
        self.seat_of_cell[row * self.cols + col]
    }

    pub fn block_of_seat(&self, seat: usize) -> usize {
        self.block_of_seat[seat] as usize
    }

    pub fn block_count(&self) -> usize {
        self.block_letters.len()
    }

    pub fn block_letters(&self) -> &[char] {
        &self.block_letters
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.block_count()];
        for &b in &self.block_of_seat {
            sizes[b as usize] += 1;
        }
        sizes
    }

    pub fn exits(&self) -> &[Exit] {
        &self.exits
    }

    pub fn exit(&self, id: u8) -> Option<&Exit> {
        self.exits.get((id as usize).wrapping_sub(1))
    }

    /// Canonical text form; `parse(render())` reproduces the layout.
    pub fn render(&self) -> String {
        let mut out = format!("{} {}\n", self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(match self.cell(r, c) {
                    CellKind::Seat => 'S',
                    CellKind::Aisle => '.',
                    CellKind::Wall => '#',
                    CellKind::Exit(id) => (b'0' + id) as char,
                });
            }
            out.push('\n');
        }
        out.push_str("blocks\n");
        for b in &self.rects {
            let _ = writeln!(out, "{} {}-{} {}-{}", b.letter, b.rows.0, b.rows.1, b.cols.0, b.cols.1);
        }
        out
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Replaces one cell; used to build layout variants.
    pub fn with_cell(&self, row: usize, col: usize, kind: CellKind) -> Result<Self, SimError> {
        let mut text: Vec<Vec<char>> = self.render().lines().map(|l| l.chars().collect()).collect();
        text[row + 1][col] = match kind {
            CellKind::Seat => 'S',
            CellKind::Aisle => '.',
            CellKind::Wall => '#',
            CellKind::Exit(id) => (b'0' + id) as char,
        };
        let joined: Vec<String> = text.into_iter().map(|l| l.into_iter().collect()).collect();
        Self::parse(&joined.join("\n"))
    }
}

fn parse_range(tok: &str) -> Result<(usize, usize), String> {
    let (a, b) = tok.split_once('-').ok_or_else(|| format!("range {tok:?} must look like a-b"))?;
    let a = a.parse().map_err(|_| format!("bad range start in {tok:?}"))?;
    let b = b.parse().map_err(|_| format!("bad range end in {tok:?}"))?;
    if a > b {
        return Err(format!("empty range {tok:?}"));
    }
    Ok((a, b))
}

fn parse_rect(line: &str) -> Result<BlockRect, String> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    let [letter, rows, cols] = toks[..] else {
        return Err("block line must be `<letter> <r0>-<r1> <c0>-<c1>`".into());
    };
    let mut chars = letter.chars();
    let (Some(letter), None) = (chars.next(), chars.next()) else {
        return Err(format!("block name {letter:?} must be one letter"));
    };
    if !letter.is_ascii_uppercase() {
        return Err(format!("block name {letter:?} must be an uppercase letter"));
    }
    Ok(BlockRect { letter, rows: parse_range(rows)?, cols: parse_range(cols)? })
}

/// The bundled 22 × 42 theater: 868 seats in blocks A–D and six exits.
pub fn build_default_layout() -> TheaterLayout {
    TheaterLayout::parse(DEFAULT_LAYOUT).expect("bundled layout is valid")
}
