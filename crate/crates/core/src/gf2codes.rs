//! GF(2) linear algebra, parity-check codes and their generators.
//!
//! A [`ParityCheckCode`] is built from a full-row-rank parity-check matrix
//! `H` ((n-k) x n). The generator `G` (k x n) is derived by Gauss-Jordan
//! elimination with pivots chosen from the rightmost columns, so message
//! bits land on the free columns and `G` is already expressed in the
//! original column order of `H`. `col_perm` records the column order that
//! brings `G` to systematic form `[I_k | P]`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::seeding::mix_seed;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodeError {
    #[error("matrix dimensions must be at least 1x1 (got {rows}x{cols})")]
    EmptyMatrix { rows: usize, cols: usize },
    #[error("bit matrix data has {got} entries, expected {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("bit matrix entry {value} at index {index} is not 0 or 1")]
    NotBinary { index: usize, value: u8 },
    #[error("parity-check matrix is rank deficient: rank {rank} < {rows} rows")]
    RankDeficient { rank: usize, rows: usize },
    #[error("parity-check matrix has an all-zero row {0}")]
    ZeroRow(usize),
    #[error("parity-check matrix has an all-zero column {0}")]
    ZeroColumn(usize),
    #[error("parity-check matrix must have fewer rows than columns (got {rows}x{cols})")]
    NoMessageBits { rows: usize, cols: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("alist line {line}: {msg}")]
    Alist { line: usize, msg: String },
    #[error("infeasible degree profile: n={n}, column weight {col_weight}, row weight {row_weight}")]
    InfeasibleProfile {
        n: usize,
        col_weight: usize,
        row_weight: usize,
    },
    #[error("no full-rank parity-check matrix found after {attempts} attempts")]
    ConstructionFailed { attempts: usize },
}

/// Dense binary matrix, one byte per entry, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self, CodeError> {
        if rows == 0 || cols == 0 {
            return Err(CodeError::EmptyMatrix { rows, cols });
        }
        Ok(Self {
            rows,
            cols,
            bits: vec![0; rows * cols],
        })
    }

    pub fn from_vec(rows: usize, cols: usize, bits: Vec<u8>) -> Result<Self, CodeError> {
        if rows == 0 || cols == 0 {
            return Err(CodeError::EmptyMatrix { rows, cols });
        }
        if bits.len() != rows * cols {
            return Err(CodeError::DataLength {
                expected: rows * cols,
                got: bits.len(),
            });
        }
        if let Some((index, &value)) = bits.iter().enumerate().find(|(_, &b)| b > 1) {
            return Err(CodeError::NotBinary { index, value });
        }
        Ok(Self { rows, cols, bits })
    }

    /// Builds a matrix from nested rows; every row must have the same length.
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self, CodeError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut bits = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(CodeError::LengthMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            bits.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, bits)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.bits[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.bits[r * self.cols + c] = v & 1;
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.bits
    }

    pub fn transpose(&self) -> BitMatrix {
        let mut t = vec![0u8; self.bits.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[c * self.rows + r] = self.get(r, c);
            }
        }
        BitMatrix {
            rows: self.cols,
            cols: self.rows,
            bits: t,
        }
    }

    /// Matrix product over GF(2).
    pub fn mul(&self, other: &BitMatrix) -> Result<BitMatrix, CodeError> {
        if self.cols != other.rows {
            return Err(CodeError::LengthMismatch {
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = BitMatrix::zeros(self.rows, other.cols)?;
        for r in 0..self.rows {
            for k in 0..self.cols {
                if self.get(r, k) == 1 {
                    for c in 0..other.cols {
                        out.bits[r * other.cols + c] ^= other.get(k, c);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Matrix-vector product over GF(2).
    pub fn mul_vec(&self, v: &[u8]) -> Result<Vec<u8>, CodeError> {
        if v.len() != self.cols {
            return Err(CodeError::LengthMismatch {
                expected: self.cols,
                got: v.len(),
            });
        }
        Ok((0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(v)
                    .fold(0u8, |acc, (&h, &x)| acc ^ (h & x & 1))
            })
            .collect())
    }

    pub fn is_zero(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn rank(&self) -> usize {
        rref_right_to_left(self).pivots.len()
    }
}

impl fmt::Debug for BitMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BitMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            let line: String = self.row(r).iter().map(|b| if *b == 1 { '1' } else { '0' }).collect();
            writeln!(f, "  {line}")?;
        }
        write!(f, "]")
    }
}

struct Rref {
    matrix: BitMatrix,
    /// (row, pivot column) in the order pivots were found.
    pivots: Vec<(usize, usize)>,
}

/// Gauss-Jordan elimination scanning columns from right to left.
fn rref_right_to_left(h: &BitMatrix) -> Rref {
    let mut m = h.clone();
    let mut pivots = Vec::new();
    let mut next_row = 0;
    for col in (0..m.cols).rev() {
        if next_row == m.rows {
            break;
        }
        let Some(p) = (next_row..m.rows).find(|&r| m.get(r, col) == 1) else {
            continue;
        };
        if p != next_row {
            for c in 0..m.cols {
                m.bits.swap(p * m.cols + c, next_row * m.cols + c);
            }
        }
        for r in 0..m.rows {
            if r != next_row && m.get(r, col) == 1 {
                for c in 0..m.cols {
                    let v = m.get(next_row, c);
                    m.bits[r * m.cols + c] ^= v;
                }
            }
        }
        pivots.push((next_row, col));
        next_row += 1;
    }
    Rref { matrix: m, pivots }
}

/// Derives a generator for the nullspace of `h`.
///
/// Returns `(g, col_perm)` where `g` is k x n in the original column order and
/// `col_perm` lists the free (message) columns followed by the pivot columns,
/// so that `g` restricted to `col_perm` reads `[I_k | P]`.
pub fn derive_generator(h: &BitMatrix) -> Result<(BitMatrix, Vec<usize>), CodeError> {
    let rref = rref_right_to_left(h);
    if rref.pivots.len() < h.rows {
        return Err(CodeError::RankDeficient {
            rank: rref.pivots.len(),
            rows: h.rows,
        });
    }
    let n = h.cols;
    let k = n - h.rows;
    if k == 0 {
        return Err(CodeError::NoMessageBits {
            rows: h.rows,
            cols: h.cols,
        });
    }
    let mut is_pivot = vec![false; n];
    for &(_, c) in &rref.pivots {
        is_pivot[c] = true;
    }
    let free: Vec<usize> = (0..n).filter(|&c| !is_pivot[c]).collect();
    let mut g = BitMatrix::zeros(k, n)?;
    for (t, &f) in free.iter().enumerate() {
        g.set(t, f, 1);
        for &(r, pc) in &rref.pivots {
            if rref.matrix.get(r, f) == 1 {
                g.set(t, pc, 1);
            }
        }
    }
    let mut pivot_cols: Vec<usize> = rref.pivots.iter().map(|&(_, c)| c).collect();
    pivot_cols.sort_unstable();
    let col_perm = free.into_iter().chain(pivot_cols).collect();
    Ok((g, col_perm))
}

/// Binary linear code defined by a full-rank parity-check matrix.
#[derive(Clone, Debug)]
pub struct ParityCheckCode {
    h: BitMatrix,
    g: BitMatrix,
    col_perm: Vec<usize>,
    n: usize,
    k: usize,
}

impl ParityCheckCode {
    pub fn from_parity_check(h: BitMatrix) -> Result<Self, CodeError> {
        if h.rows >= h.cols {
            return Err(CodeError::NoMessageBits {
                rows: h.rows,
                cols: h.cols,
            });
        }
        if let Some(r) = (0..h.rows).find(|&r| h.row(r).iter().all(|&b| b == 0)) {
            return Err(CodeError::ZeroRow(r));
        }
        if let Some(c) = (0..h.cols).find(|&c| (0..h.rows).all(|r| h.get(r, c) == 0)) {
            return Err(CodeError::ZeroColumn(c));
        }
        let (g, col_perm) = derive_generator(&h)?;
        let n = h.cols;
        let k = n - h.rows;
        debug_assert!(g.mul(&h.transpose()).map(|p| p.is_zero()).unwrap_or(false));
        Ok(Self {
            h,
            g,
            col_perm,
            n,
            k,
        })
    }

    /// Single parity-check code of length `n` (H = all ones).
    pub fn single_parity_check(n: usize) -> Result<Self, CodeError> {
        Self::from_parity_check(BitMatrix::from_vec(1, n, vec![1; n])?)
    }

    /// Repetition code of length `n`: chain of adjacent-pair checks.
    pub fn repetition(n: usize) -> Result<Self, CodeError> {
        if n < 2 {
            return Err(CodeError::NoMessageBits { rows: 0, cols: n });
        }
        let mut h = BitMatrix::zeros(n - 1, n)?;
        for r in 0..n - 1 {
            h.set(r, r, 1);
            h.set(r, r + 1, 1);
        }
        Self::from_parity_check(h)
    }

    /// Hamming(7,4) with column `i` holding the binary expansion of `i + 1`.
    pub fn hamming74() -> Self {
        let mut h = BitMatrix::zeros(3, 7).expect("static dimensions");
        for c in 0..7 {
            for r in 0..3 {
                if (c + 1) >> r & 1 == 1 {
                    h.set(r, c, 1);
                }
            }
        }
        Self::from_parity_check(h).expect("Hamming(7,4) is full rank")
    }

    pub fn h(&self) -> &BitMatrix {
        &self.h
    }

    pub fn g(&self) -> &BitMatrix {
        &self.g
    }

    pub fn col_perm(&self) -> &[usize] {
        &self.col_perm
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of checks, n - k.
    pub fn m(&self) -> usize {
        self.n - self.k
    }

    pub fn rate(&self) -> f64 {
        self.k as f64 / self.n as f64
    }

    /// c = u G over GF(2).
    pub fn encode(&self, u: &[u8]) -> Result<Vec<u8>, CodeError> {
        if u.len() != self.k {
            return Err(CodeError::LengthMismatch {
                expected: self.k,
                got: u.len(),
            });
        }
        let mut c = vec![0u8; self.n];
        for (t, &bit) in u.iter().enumerate() {
            if bit & 1 == 1 {
                for (ci, &gi) in c.iter_mut().zip(self.g.row(t)) {
                    *ci ^= gi;
                }
            }
        }
        Ok(c)
    }

    /// Draws a message uniformly from GF(2)^k and encodes it.
    pub fn sample_codeword<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u8> {
        let u: Vec<u8> = (0..self.k).map(|_| rng.gen_range(0..2u8)).collect();
        self.encode(&u).expect("message length is k")
    }

    pub fn hard_syndrome(&self, c_hat: &[u8]) -> Result<Vec<u8>, CodeError> {
        hard_syndrome(&self.h, c_hat)
    }

    /// Enumerates all 2^k codewords. Only sensible for small k.
    pub fn codewords(&self) -> Vec<Vec<u8>> {
        assert!(self.k < 24, "codebook enumeration limited to k < 24");
        (0..1usize << self.k)
            .map(|idx| {
                let u: Vec<u8> = (0..self.k).map(|t| (idx >> t & 1) as u8).collect();
                self.encode(&u).expect("message length is k")
            })
            .collect()
    }

    /// Serializes H in alist layout.
    pub fn to_alist(&self) -> String {
        let (n, m) = (self.n, self.m());
        let col_lists: Vec<Vec<usize>> = (0..n)
            .map(|c| (0..m).filter(|&r| self.h.get(r, c) == 1).map(|r| r + 1).collect())
            .collect();
        let row_lists: Vec<Vec<usize>> = (0..m)
            .map(|r| (0..n).filter(|&c| self.h.get(r, c) == 1).map(|c| c + 1).collect())
            .collect();
        let max_col = col_lists.iter().map(Vec::len).max().unwrap_or(0);
        let max_row = row_lists.iter().map(Vec::len).max().unwrap_or(0);
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        let padded = |v: &[usize], w: usize| {
            let mut p = v.to_vec();
            p.resize(w, 0);
            join(&p)
        };
        let mut s = format!("{n} {m}\n{max_col} {max_row}\n");
        s += &join(&col_lists.iter().map(Vec::len).collect::<Vec<_>>());
        s.push('\n');
        s += &join(&row_lists.iter().map(Vec::len).collect::<Vec<_>>());
        s.push('\n');
        for l in &col_lists {
            s += &padded(l, max_col);
            s.push('\n');
        }
        for l in &row_lists {
            s += &padded(l, max_row);
            s.push('\n');
        }
        s
    }
}

/// s = H c over GF(2).
pub fn hard_syndrome(h: &BitMatrix, c_hat: &[u8]) -> Result<Vec<u8>, CodeError> {
    h.mul_vec(c_hat)
}

fn alist_err(line: usize, msg: impl Into<String>) -> CodeError {
    CodeError::Alist {
        line,
        msg: msg.into(),
    }
}

fn parse_ints(line_no: usize, line: &str) -> Result<Vec<usize>, CodeError> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<usize>()
                .map_err(|_| alist_err(line_no, format!("non-integer token {tok:?}")))
        })
        .collect()
}

/// Parses a MacKay alist description of H.
pub fn parse_alist(text: &str) -> Result<ParityCheckCode, CodeError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| alist_err(0, format!("unexpected end of input, expected {what}")))
    };

    let (ln, l) = next("dimensions")?;
    let dims = parse_ints(ln, l)?;
    let [n, m] = dims[..] else {
        return Err(alist_err(ln, "expected \"n m\""));
    };
    if n == 0 || m == 0 {
        return Err(alist_err(ln, "dimensions must be positive"));
    }
    let (ln, l) = next("maximum degrees")?;
    let maxes = parse_ints(ln, l)?;
    let [max_col, max_row] = maxes[..] else {
        return Err(alist_err(ln, "expected \"max_col_deg max_row_deg\""));
    };
    let (ln, l) = next("column degrees")?;
    let col_deg = parse_ints(ln, l)?;
    if col_deg.len() != n {
        return Err(alist_err(ln, format!("expected {n} column degrees, got {}", col_deg.len())));
    }
    let (ln, l) = next("row degrees")?;
    let row_deg = parse_ints(ln, l)?;
    if row_deg.len() != m {
        return Err(alist_err(ln, format!("expected {m} row degrees, got {}", row_deg.len())));
    }
    if col_deg.iter().any(|&d| d > max_col) || row_deg.iter().any(|&d| d > max_row) {
        return Err(alist_err(ln, "degree exceeds declared maximum"));
    }

    let mut h = BitMatrix::zeros(m, n)?;
    for (c, &deg) in col_deg.iter().enumerate() {
        let (ln, l) = next("column neighbor list")?;
        let nbrs: Vec<usize> = parse_ints(ln, l)?.into_iter().filter(|&x| x != 0).collect();
        if nbrs.len() != deg {
            return Err(alist_err(
                ln,
                format!("column {} lists {} checks, declared degree {deg}", c + 1, nbrs.len()),
            ));
        }
        for r in nbrs {
            if r > m {
                return Err(alist_err(ln, format!("check index {r} out of range 1..={m}")));
            }
            if h.get(r - 1, c) == 1 {
                return Err(alist_err(ln, format!("duplicate check index {r}")));
            }
            h.set(r - 1, c, 1);
        }
    }
    for (r, &deg) in row_deg.iter().enumerate() {
        let (ln, l) = next("row neighbor list")?;
        let nbrs: Vec<usize> = parse_ints(ln, l)?.into_iter().filter(|&x| x != 0).collect();
        if nbrs.len() != deg {
            return Err(alist_err(
                ln,
                format!("row {} lists {} variables, declared degree {deg}", r + 1, nbrs.len()),
            ));
        }
        for c in nbrs {
            if c > n {
                return Err(alist_err(ln, format!("variable index {c} out of range 1..={n}")));
            }
            if h.get(r, c - 1) != 1 {
                return Err(alist_err(
                    ln,
                    format!("row {} lists variable {c} absent from the column lists", r + 1),
                ));
            }
        }
    }
    ParityCheckCode::from_parity_check(h)
}

const MAX_LDPC_ATTEMPTS: usize = 1000;

/// Random (col_weight, row_weight)-regular LDPC code.
///
/// Each variable picks `col_weight` distinct checks among those with spare
/// capacity, weighted by that capacity. Draws that dead-end or give a
/// rank-deficient H are retried; attempt `a` uses a ChaCha8 stream seeded
/// with `mix_seed(seed, a, 0)`.
pub fn random_regular_ldpc(
    n: usize,
    col_weight: usize,
    row_weight: usize,
    seed: u64,
) -> Result<ParityCheckCode, CodeError> {
    let infeasible = CodeError::InfeasibleProfile {
        n,
        col_weight,
        row_weight,
    };
    if n == 0 || col_weight == 0 || row_weight == 0 || !(n * col_weight).is_multiple_of(row_weight) {
        return Err(infeasible);
    }
    let m = n * col_weight / row_weight;
    if m == 0 || m >= n || col_weight > m || row_weight > n {
        return Err(infeasible);
    }
    'attempts: for attempt in 0..MAX_LDPC_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, attempt as u64, 0));
        let mut spare = vec![row_weight; m];
        let mut h = BitMatrix::zeros(m, n)?;
        for c in 0..n {
            for _ in 0..col_weight {
                let total: usize = (0..m).filter(|&r| h.get(r, c) == 0).map(|r| spare[r]).sum();
                if total == 0 {
                    continue 'attempts;
                }
                let mut pick = rng.gen_range(0..total);
                let r = (0..m)
                    .filter(|&r| h.get(r, c) == 0)
                    .find(|&r| {
                        if pick < spare[r] {
                            true
                        } else {
                            pick -= spare[r];
                            false
                        }
                    })
                    .expect("pick lies below the total weight");
                spare[r] -= 1;
                h.set(r, c, 1);
            }
        }
        match ParityCheckCode::from_parity_check(h) {
            Ok(code) => return Ok(code),
            Err(CodeError::RankDeficient { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(CodeError::ConstructionFailed {
        attempts: MAX_LDPC_ATTEMPTS,
    })
}
