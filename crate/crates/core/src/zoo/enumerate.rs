//! Hyper-parameter grids of every family.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::zoo::arch::{ExtractorSpec, Family, ModelSpec, Token, DEFAULT_CLASSES, DEFAULT_HIDDEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Every 1- and 2-conv extractor, pool optional.
    Full,
    /// Two-conv extractors must pool after the first conv (48 single-frame variants).
    SfPaper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "sf-paper" => Ok(Preset::SfPaper),
            _ => Err(Error::Invalid(format!(
                "unknown preset '{s}' (full, sf-paper)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridConfig {
    pub channels: Vec<usize>,
    pub windows: Vec<usize>,
    /// Hidden FC widths (cat), LSTM hidden sizes and TCN channels.
    pub heads: Vec<usize>,
    pub preset: Preset,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32, 64],
            windows: vec![3, 5, 7, 9],
            heads: vec![8, 16, 32, 64],
            preset: Preset::Full,
        }
    }
}

fn extractor_grid(grid: &GridConfig) -> Vec<ExtractorSpec> {
    let mut out = Vec::new();
    for &c in &grid.channels {
        for pool in [false, true] {
            out.push(ExtractorSpec {
                convs: vec![c],
                pool,
            });
        }
    }
    for &c1 in &grid.channels {
        for &c2 in &grid.channels {
            for pool in [false, true] {
                if grid.preset == Preset::SfPaper && !pool {
                    continue;
                }
                out.push(ExtractorSpec {
                    convs: vec![c1, c2],
                    pool,
                });
            }
        }
    }
    out
}

fn spec(family: Family, window: usize, tokens: Vec<Token>) -> Result<ModelSpec> {
    let s = ModelSpec {
        family,
        window,
        tokens,
        classes: DEFAULT_CLASSES,
    };
    s.validate()?;
    Ok(s)
}

fn push_unique(out: &mut Vec<ModelSpec>, seen: &mut BTreeSet<String>, s: ModelSpec) {
    if seen.insert(s.render()) {
        out.push(s);
    }
}

/// Specs of one family.
///
/// `sf` and `mc` cross extractors with one or two FC layers. The dependent families
/// take `bases` (single-frame specs): `mv` votes over a whole base model, while
/// `cat`, `lstm` and `tcn` reuse its conv/pool prefix.
pub fn enumerate_family(
    family: Family,
    grid: &GridConfig,
    bases: &[ModelSpec],
) -> Result<Vec<ModelSpec>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    match family {
        Family::Sf | Family::Mc => {
            let windows = if family == Family::Sf {
                vec![1]
            } else {
                grid.windows.clone()
            };
            for w in windows {
                for ex in extractor_grid(grid) {
                    for hidden in [false, true] {
                        let mut t = ex.tokens();
                        if hidden {
                            t.push(Token::Hidden(DEFAULT_HIDDEN));
                        }
                        t.push(Token::Output);
                        if let Ok(s) = spec(family, w, t) {
                            push_unique(&mut out, &mut seen, s);
                        }
                    }
                }
            }
        }
        _ => {
            if bases.is_empty() {
                return Err(Error::Empty(format!("extractor list for {family}")));
            }
            for &w in &grid.windows {
                for base in bases {
                    if family == Family::Mv {
                        push_unique(&mut out, &mut seen, spec(family, w, base.tokens.clone())?);
                        continue;
                    }
                    for &h in &grid.heads {
                        let mut t = base.extractor().tokens();
                        match family {
                            Family::Cat => t.extend([Token::Cat, Token::Hidden(h), Token::Output]),
                            Family::Lstm => t.extend([Token::Lstm(h), Token::Output]),
                            Family::Tcn => t.extend([Token::Tcn(h), Token::Output]),
                            _ => unreachable!(),
                        }
                        push_unique(&mut out, &mut seen, spec(family, w, t)?);
                    }
                }
            }
        }
    }
    Ok(out)
}
