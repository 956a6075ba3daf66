//! Synthetic datasets: sums of sinusoids for forecasting and a ring-closure
//! token language with long-range paired markers.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

/// Number of steps after the initial state.
pub const SINUSOID_STEPS: usize = 100;
pub const SINUSOID_COMPONENTS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub alphas: [f64; SINUSOID_COMPONENTS],
    pub betas: [f64; SINUSOID_COMPONENTS],
    /// States `y_0 ..= y_100`.
    pub y: Vec<f64>,
}

impl Trajectory {
    /// Builds a trajectory from its own seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut alphas = [0.0; SINUSOID_COMPONENTS];
        let mut betas = [0.0; SINUSOID_COMPONENTS];
        for j in 0..SINUSOID_COMPONENTS {
            alphas[j] = rng.random_range(0.5..=1.5);
            betas[j] = rng.random_range(0.0..=3.0 * std::f64::consts::PI);
        }
        let dx = 3.0 * std::f64::consts::PI / 100.0;
        let mut x = 0.0;
        let mut y = Vec::with_capacity(SINUSOID_STEPS + 1);
        for t in 0..=SINUSOID_STEPS {
            if t > 0 {
                x += dx;
            }
            let s: f64 = alphas
                .iter()
                .zip(&betas)
                .map(|(a, b)| (a * x + b).sin())
                .sum();
            y.push(s / SINUSOID_COMPONENTS as f64);
        }
        Trajectory {
            seed,
            alphas,
            betas,
            y,
        }
    }
}

/// `n` trajectories with per-trajectory seeds derived from `seed`.
pub fn gen_sinusoid(n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::invalid("need at least one trajectory"));
    }
    Ok((0..n as u64)
        .map(|i| Trajectory::from_seed(derive_seed(seed, i)))
        .collect())
}

/// Train and test sets drawn from disjoint seed streams.
pub fn sinusoid_split(n_train: usize, n_test: usize, seed: u64) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    let train = gen_sinusoid(n_train, derive_seed(seed, 0x7472_6169_6e))?;
    let test = gen_sinusoid(n_test, derive_seed(seed, 0x7465_7374))?;
    Ok((train, test))
}

pub fn sinusoid_header() -> String {
    let mut h = String::from("seed");
    for j in 1..=SINUSOID_COMPONENTS {
        write!(h, ",alpha{j}").unwrap();
    }
    for j in 1..=SINUSOID_COMPONENTS {
        write!(h, ",beta{j}").unwrap();
    }
    for t in 0..=SINUSOID_STEPS {
        write!(h, ",y{t}").unwrap();
    }
    h
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_trajectories(mut w: impl Write, data: &[Trajectory]) -> Result<()> {
    writeln!(w, "{}", sinusoid_header())?;
    for tr in data {
        let mut line = tr.seed.to_string();
        for v in tr.alphas.iter().chain(&tr.betas).chain(&tr.y) {
            line.push(',');
            line.push_str(&fmt_f64(*v));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_trajectories(r: impl BufRead) -> Result<Vec<Trajectory>> {
    let expected = 1 + 2 * SINUSOID_COMPONENTS + SINUSOID_STEPS + 1;
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with("seed") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected {
            return Err(Error::Parse(format!(
                "line {}: expected {expected} fields, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let seed = fields[0]
            .parse::<u64>()
            .map_err(|e| Error::Parse(format!("line {}: seed: {e}", lineno + 1)))?;
        let nums = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        let mut alphas = [0.0; SINUSOID_COMPONENTS];
        let mut betas = [0.0; SINUSOID_COMPONENTS];
        alphas.copy_from_slice(&nums[..SINUSOID_COMPONENTS]);
        betas.copy_from_slice(&nums[SINUSOID_COMPONENTS..2 * SINUSOID_COMPONENTS]);
        out.push(Trajectory {
            seed,
            alphas,
            betas,
            y: nums[2 * SINUSOID_COMPONENTS..].to_vec(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ring language

pub const LETTERS: [&str; 5] = ["a", "b", "c", "d", "e"];
pub const MAX_MARKERS: usize = 9;
/// Letters `a..e` are ids 0..5, markers `1..9` are ids 5..14, then the end token.
pub const VOCAB_SIZE: usize = LETTERS.len() + MAX_MARKERS + 1;
pub const END: usize = VOCAB_SIZE - 1;
pub const END_STR: &str = "<end>";

pub fn is_letter(id: usize) -> bool {
    id < LETTERS.len()
}

/// Marker digit (1..=9) for a token id, if it is one.
pub fn marker_digit(id: usize) -> Option<usize> {
    (LETTERS.len()..LETTERS.len() + MAX_MARKERS)
        .contains(&id)
        .then(|| id - LETTERS.len() + 1)
}

pub fn marker_id(digit: usize) -> usize {
    debug_assert!((1..=MAX_MARKERS).contains(&digit));
    LETTERS.len() + digit - 1
}

pub fn token_id(tok: &str) -> Result<usize> {
    if let Some(i) = LETTERS.iter().position(|&l| l == tok) {
        return Ok(i);
    }
    if tok == END_STR {
        return Ok(END);
    }
    match tok.parse::<usize>() {
        Ok(d) if (1..=MAX_MARKERS).contains(&d) && tok.len() == 1 => Ok(marker_id(d)),
        _ => Err(Error::UnknownToken(tok.to_string())),
    }
}

pub fn token_str(id: usize) -> &'static str {
    const DIGITS: [&str; MAX_MARKERS] = ["1", "2", "3", "4", "5", "6", "7", "8", "9"];
    if is_letter(id) {
        LETTERS[id]
    } else if let Some(d) = marker_digit(id) {
        DIGITS[d - 1]
    } else {
        END_STR
    }
}

pub fn parse_tokens(line: &str) -> Result<Vec<usize>> {
    line.split_whitespace().map(token_id).collect()
}

pub fn format_tokens(ids: &[usize]) -> String {
    ids.iter().map(|&i| token_str(i)).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RingString {
    pub tokens: Vec<usize>,
    pub ring_count: usize,
}

/// Checks a token sequence (without end token) against the ring grammar.
///
/// Valid strings are non-empty, start with a letter, use each marker either
/// never or exactly twice, and have at least one letter between a marker's
/// opening and closing. Returns the validity flag and the number of rings
/// opened.
pub fn ring_validity(tokens: &[usize]) -> Result<(bool, usize)> {
    if let Some(&bad) = tokens.iter().find(|&&t| t >= VOCAB_SIZE) {
        return Err(Error::UnknownToken(format!("id {bad}")));
    }
    let mut open: [Option<usize>; MAX_MARKERS + 1] = [None; MAX_MARKERS + 1];
    let mut closed = [false; MAX_MARKERS + 1];
    let mut letters_seen = 0usize;
    let mut rings = 0usize;
    let mut valid = matches!(tokens.first(), Some(&t) if is_letter(t));
    for &t in tokens {
        if is_letter(t) {
            letters_seen += 1;
        } else if let Some(d) = marker_digit(t) {
            match open[d] {
                None if closed[d] => valid = false,
                None => {
                    open[d] = Some(letters_seen);
                    rings += 1;
                }
                Some(at) => {
                    if letters_seen == at {
                        valid = false;
                    }
                    open[d] = None;
                    closed[d] = true;
                }
            }
        } else {
            // end token inside the string
            valid = false;
        }
    }
    if open.iter().any(Option::is_some) {
        valid = false;
    }
    Ok((valid, rings))
}

pub fn ring_validity_str(line: &str) -> Result<(bool, usize)> {
    ring_validity(&parse_tokens(line)?)
}

/// Probability that a ring is drawn with a long open/close separation.
const LONG_RING_PROB: f64 = 0.3;
/// Ratio of successive ring-count probabilities.
const RING_COUNT_DECAY: f64 = 0.5;
const SHORT_SEPARATION_MAX: usize = 6;

/// Random ring-language strings; every output is valid.
///
/// Long rings separate their markers by at least `max_len / 2` letters.
pub fn gen_ring_corpus(n: usize, max_rings: usize, max_len: usize, seed: u64) -> Result<Vec<RingString>> {
    if max_rings > MAX_MARKERS {
        return Err(Error::invalid(format!("max_rings must be at most {MAX_MARKERS}, got {max_rings}")));
    }
    if max_len < 4 {
        return Err(Error::invalid(format!("max_len must be at least 4, got {max_len}")));
    }
    if 2 + 2 * max_rings > max_len {
        return Err(Error::invalid(format!(
            "max_len {max_len} cannot hold {max_rings} rings (needs {})",
            2 + 2 * max_rings
        )));
    }
    let mut rng = seeded(seed);
    let weights: Vec<f64> = (0..=max_rings).map(|k| RING_COUNT_DECAY.powi(k as i32)).collect();
    let total: f64 = weights.iter().sum();
    let long_sep = max_len.div_ceil(2);

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = rng.random::<f64>() * total;
        let mut rings = max_rings;
        for (k, w) in weights.iter().enumerate() {
            if u < *w {
                rings = k;
                break;
            }
            u -= w;
        }
        let max_letters = max_len - 2 * rings;
        let long_feasible = long_sep < max_letters;
        let long: Vec<bool> = (0..rings)
            .map(|_| long_feasible && rng.random::<f64>() < LONG_RING_PROB)
            .collect();
        let min_letters = if long.iter().any(|&l| l) { long_sep + 1 } else { 2 };
        let letters = rng.random_range(min_letters..=max_letters);

        // (open letter index, close letter index) per ring
        let mut spans: Vec<(usize, usize)> = long
            .iter()
            .map(|&is_long| {
                let sep = if is_long {
                    rng.random_range(long_sep..letters)
                } else {
                    rng.random_range(1..=SHORT_SEPARATION_MAX.min(letters - 1))
                };
                let open = rng.random_range(0..letters - sep);
                (open, open + sep)
            })
            .collect();
        spans.sort_unstable();

        let mut after: Vec<Vec<usize>> = vec![Vec::new(); letters];
        for (k, &(open, close)) in spans.iter().enumerate() {
            let id = marker_id(k + 1);
            after[open].push(id);
            after[close].push(id);
        }
        let mut tokens = Vec::with_capacity(letters + 2 * rings);
        for markers in after {
            tokens.push(rng.random_range(0..LETTERS.len()));
            tokens.extend(markers);
        }
        out.push(RingString {
            tokens,
            ring_count: rings,
        });
    }
    Ok(out)
}

pub fn write_ring_corpus(mut w: impl Write, data: &[RingString]) -> Result<()> {
    for s in data {
        writeln!(w, "{}", format_tokens(&s.tokens))?;
    }
    Ok(())
}

pub fn read_ring_corpus(r: impl BufRead) -> Result<Vec<RingString>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tokens = parse_tokens(&line)?;
        let (_, ring_count) = ring_validity(&tokens)?;
        out.push(RingString { tokens, ring_count });
    }
    Ok(out)
}

/// Open/close token distances of every ring in a valid string.
pub fn ring_separations(tokens: &[usize]) -> Vec<usize> {
    let mut open = [None; MAX_MARKERS + 1];
    let mut out = Vec::new();
    for (i, &t) in tokens.iter().enumerate() {
        if let Some(d) = marker_digit(t) {
            match open[d].take() {
                Some(at) => out.push(i - at),
                None => open[d] = Some(i),
            }
        }
    }
    out
}
