//! Architecture strings.
//!
//! Grammar: `<family>:w<W>:<tokens>` with `-`-separated tokens
//!
//! | token    | meaning                                        |
//! |----------|------------------------------------------------|
//! | `C<n>`   | 3x3 conv with `n` channels, BatchNorm, ReLU    |
//! | `P`      | 2x2 max pooling (only right after the first conv) |
//! | `Cat`    | concatenation of per-frame features (`cat`)    |
//! | `L<h>`   | LSTM with hidden size `h` (`lstm`)             |
//! | `T<c>`   | causal 1D conv with `c` channels (`tcn`); `TCN<c>` is accepted |
//! | `FC<n>`  | hidden fully connected layer + ReLU            |
//! | `FC`     | output layer with one unit per count class; a bare `FC` that is not last is a 64-unit hidden layer |
//!
//! Example: `lstm:w3:C8-P-C8-L16-FC`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const FRAME_SIDE: usize = 8;
pub const DEFAULT_CLASSES: usize = 4;
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    /// single-frame CNN
    Sf,
    /// multi-channel CNN (frames stacked as channels)
    Mc,
    /// majority voting over per-frame predictions
    Mv,
    /// concatenated per-frame features
    Cat,
    Lstm,
    Tcn,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Sf,
        Family::Mc,
        Family::Mv,
        Family::Cat,
        Family::Lstm,
        Family::Tcn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Sf => "sf",
            Family::Mc => "mc",
            Family::Mv => "mv",
            Family::Cat => "cat",
            Family::Lstm => "lstm",
            Family::Tcn => "tcn",
        }
    }

    /// Families that apply a shared feature extractor to every frame.
    pub fn is_per_frame(self) -> bool {
        matches!(self, Family::Mv | Family::Cat | Family::Lstm | Family::Tcn)
    }

    pub fn supports_int8(self) -> bool {
        self != Family::Lstm
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown family `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Conv(usize),
    Pool,
    Cat,
    Lstm(usize),
    Tcn(usize),
    Hidden(usize),
    Output,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Conv(n) => write!(f, "C{n}"),
            Token::Pool => f.write_str("P"),
            Token::Cat => f.write_str("Cat"),
            Token::Lstm(h) => write!(f, "L{h}"),
            Token::Tcn(c) => write!(f, "T{c}"),
            Token::Hidden(n) => write!(f, "FC{n}"),
            Token::Output => f.write_str("FC"),
        }
    }
}

/// Conv/pool prefix shared by all families.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExtractorSpec {
    pub convs: Vec<usize>,
    pub pool: bool,
}

impl ExtractorSpec {
    /// Output geometry `(side, channels)` for an 8x8 input.
    pub fn output_geometry(&self) -> (usize, usize) {
        let mut side = FRAME_SIDE;
        for (i, _) in self.convs.iter().enumerate() {
            side -= 2;
            if i == 0 && self.pool {
                side /= 2;
            }
        }
        (side, *self.convs.last().expect("at least one conv"))
    }

    pub fn feature_len(&self) -> usize {
        let (side, ch) = self.output_geometry();
        side * side * ch
    }

    pub fn tokens(&self) -> Vec<Token> {
        let mut t = vec![Token::Conv(self.convs[0])];
        if self.pool {
            t.push(Token::Pool);
        }
        t.extend(self.convs[1..].iter().map(|&c| Token::Conv(c)));
        t
    }

    pub fn render(&self) -> String {
        join_tokens(&self.tokens())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalSpec {
    None,
    Cat,
    Lstm(usize),
    Tcn(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub family: Family,
    pub window: usize,
    pub tokens: Vec<Token>,
    pub classes: usize,
}

fn join_tokens(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join("-")
}

fn parse_count(text: &str, tok: &str, digits: &str) -> Result<usize> {
    let n: usize = digits
        .parse()
        .map_err(|_| Error::UnknownToken(tok.to_string()))?;
    if n == 0 {
        return Err(Error::Arch {
            text: text.into(),
            reason: format!("token `{tok}` has zero width"),
        });
    }
    Ok(n)
}

fn parse_token(text: &str, tok: &str, is_last: bool) -> Result<Token> {
    let digits = |prefix: &str| {
        tok.strip_prefix(prefix)
            .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
    };
    Ok(match tok {
        "P" => Token::Pool,
        "Cat" => Token::Cat,
        "FC" if is_last => Token::Output,
        "FC" => Token::Hidden(DEFAULT_HIDDEN),
        _ => {
            if let Some(d) = digits("FC") {
                Token::Hidden(parse_count(text, tok, d)?)
            } else if let Some(d) = digits("TCN") {
                Token::Tcn(parse_count(text, tok, d)?)
            } else if let Some(d) = digits("C") {
                Token::Conv(parse_count(text, tok, d)?)
            } else if let Some(d) = digits("L") {
                Token::Lstm(parse_count(text, tok, d)?)
            } else if let Some(d) = digits("T") {
                Token::Tcn(parse_count(text, tok, d)?)
            } else {
                return Err(Error::UnknownToken(tok.to_string()));
            }
        }
    })
}

impl ModelSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let arch_err = |reason: String| Error::Arch {
            text: text.to_string(),
            reason,
        };
        let mut parts = text.trim().splitn(3, ':');
        let (fam, win, body) = match (parts.next(), parts.next(), parts.next()) {
            (Some(f), Some(w), Some(b)) => (f, w, b),
            _ => return Err(arch_err("expected `<family>:w<W>:<layers>`".into())),
        };
        let family: Family = fam
            .parse()
            .map_err(|_| arch_err(format!("unknown family `{fam}`")))?;
        let window: usize = win
            .strip_prefix('w')
            .and_then(|w| w.parse().ok())
            .ok_or_else(|| arch_err(format!("bad window field `{win}`")))?;
        let raw: Vec<&str> = body.split('-').collect();
        if raw.iter().any(|t| t.is_empty()) {
            return Err(arch_err("empty layer token".into()));
        }
        let tokens = raw
            .iter()
            .enumerate()
            .map(|(i, t)| parse_token(text, t, i + 1 == raw.len()))
            .collect::<Result<Vec<_>>>()?;
        let spec = ModelSpec {
            family,
            window,
            tokens,
            classes: DEFAULT_CLASSES,
        };
        spec.validate().map_err(|e| match e {
            Error::Arch { reason, .. } => arch_err(reason),
            other => other,
        })?;
        Ok(spec)
    }

    pub fn render(&self) -> String {
        format!(
            "{}:w{}:{}",
            self.family,
            self.window,
            join_tokens(&self.tokens)
        )
    }

    /// Layer part of the string without family and window, e.g. `C8-P-FC`.
    pub fn body(&self) -> String {
        join_tokens(&self.tokens)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |reason: &str| {
            Err(Error::Arch {
                text: self.render(),
                reason: reason.to_string(),
            })
        };
        match self.family {
            Family::Sf if self.window != 1 => return err("single-frame models require w1"),
            _ if self.window == 0 => return err("window must be positive"),
            _ if self.window % 2 == 0 => return err("multi-frame models require an odd window"),
            _ => {}
        }
        if self.classes < 2 {
            return err("need at least two output classes");
        }

        let mut it = self.tokens.iter().peekable();
        let mut side = FRAME_SIDE;
        let mut convs = 0;
        // extractor: C [P] [C]
        match it.next() {
            Some(Token::Conv(_)) => {}
            _ => return err("layers must start with a conv token"),
        }
        side -= 2;
        convs += 1;
        if it.peek() == Some(&&Token::Pool) {
            it.next();
            if side % 2 != 0 {
                return Err(Error::Geometry(format!("pooling a {side}x{side} map")));
            }
            side /= 2;
        }
        while let Some(Token::Conv(_)) = it.peek() {
            it.next();
            if convs == 2 {
                return Err(Error::Geometry(format!(
                    "{}: at most two conv layers fit an 8x8 input",
                    self.render()
                )));
            }
            if side < 3 {
                return Err(Error::Geometry(format!(
                    "{}: conv on a {side}x{side} map",
                    self.render()
                )));
            }
            side -= 2;
            convs += 1;
        }
        if it.peek() == Some(&&Token::Pool) {
            return Err(Error::Geometry(format!(
                "{}: pooling is only allowed right after the first conv",
                self.render()
            )));
        }

        let temporal = match it.peek() {
            Some(Token::Cat) | Some(Token::Lstm(_)) | Some(Token::Tcn(_)) => it.next().copied(),
            _ => None,
        };
        let expected = match self.family {
            Family::Cat => "Cat",
            Family::Lstm => "L<h>",
            Family::Tcn => "T<c>",
            _ => "",
        };
        let ok = matches!(
            (self.family, temporal),
            (Family::Sf | Family::Mc | Family::Mv, None)
                | (Family::Cat, Some(Token::Cat))
                | (Family::Lstm, Some(Token::Lstm(_)))
                | (Family::Tcn, Some(Token::Tcn(_)))
        );
        if !ok {
            return if expected.is_empty() {
                err(&format!("family {} takes no Cat/L/T token", self.family))
            } else {
                err(&format!(
                    "family {} needs exactly one {expected} token after the extractor",
                    self.family
                ))
            };
        }

        let mut hidden = 0;
        loop {
            match it.next() {
                Some(Token::Hidden(_)) => {
                    hidden += 1;
                    if hidden > 1 {
                        return err("at most one hidden FC layer");
                    }
                }
                Some(Token::Output) => break,
                Some(t) => return err(&format!("unexpected token `{t}` in the head")),
                None => return err("missing terminal FC"),
            }
        }
        if let Some(t) = it.next() {
            return err(&format!("token `{t}` after the terminal FC"));
        }
        Ok(())
    }

    pub fn extractor(&self) -> ExtractorSpec {
        let mut convs = Vec::new();
        let mut pool = false;
        for t in &self.tokens {
            match *t {
                Token::Conv(n) => convs.push(n),
                Token::Pool => pool = true,
                _ => break,
            }
        }
        ExtractorSpec { convs, pool }
    }

    pub fn temporal(&self) -> TemporalSpec {
        for t in &self.tokens {
            match *t {
                Token::Cat => return TemporalSpec::Cat,
                Token::Lstm(h) => return TemporalSpec::Lstm(h),
                Token::Tcn(c) => return TemporalSpec::Tcn(c),
                _ => {}
            }
        }
        TemporalSpec::None
    }

    pub fn hidden_units(&self) -> Option<usize> {
        self.tokens.iter().find_map(|t| match *t {
            Token::Hidden(n) => Some(n),
            _ => None,
        })
    }

    /// Input channels of the first conv.
    pub fn input_channels(&self) -> usize {
        if self.family == Family::Mc {
            self.window
        } else {
            1
        }
    }

    /// Frames the extractor runs on per prediction.
    pub fn frames_per_prediction(&self) -> usize {
        if self.family.is_per_frame() {
            self.window
        } else {
            1
        }
    }

    /// Length of the vector entering the first FC layer.
    pub fn head_inputs(&self) -> usize {
        let f = self.extractor().feature_len();
        match self.temporal() {
            TemporalSpec::None => f,
            TemporalSpec::Cat => f * self.window,
            TemporalSpec::Lstm(h) => h,
            TemporalSpec::Tcn(c) => c * self.window,
        }
    }

    /// The single-frame network a majority-voting model runs on every frame.
    pub fn per_frame_spec(&self) -> ModelSpec {
        ModelSpec {
            family: Family::Sf,
            window: 1,
            tokens: self.tokens.clone(),
            classes: self.classes,
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelSpec::parse(s)
    }
}
