//! Command-line front end and local HTTP service for `seqaudit-core`.

pub mod cli;
pub mod service;

/// Parses a deviation-count grid: `all` (every `m` in `0..=n`) or a comma
/// list of counts and inclusive ranges such as `0-15,25,30-40`.
///
/// The result is sorted and free of duplicates.
pub fn parse_grid(spec: &str, n: u32) -> Result<Vec<u32>, String> {
    let spec = spec.trim();
    if spec.eq_ignore_ascii_case("all") {
        return Ok((0..=n).collect());
    }
    let count = |s: &str| -> Result<u32, String> {
        let v: u32 = s.trim().parse().map_err(|_| format!("`{}` is not a count", s.trim()))?;
        if v > n {
            return Err(format!("count {v} exceeds the population size {n}"));
        }
        Ok(v)
    };
    let mut grid = Vec::new();
    for part in spec.split(',') {
        match part.split_once('-') {
            Some((lo, hi)) => {
                let (lo, hi) = (count(lo)?, count(hi)?);
                if lo > hi {
                    return Err(format!("empty range `{}`", part.trim()));
                }
                grid.extend(lo..=hi);
            }
            None => grid.push(count(part)?),
        }
    }
    grid.sort_unstable();
    grid.dedup();
    Ok(grid)
}
