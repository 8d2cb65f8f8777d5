//! Mixed-model formula parsing.
//!
//! The accepted grammar is a small subset of the usual mixed-model notation:
//!
//! ```text
//! model    := response "~" rhs
//! response := ident | ident "/" ident
//! rhs      := term ("+" term)*
//! term     := "0" | "1" | ident | "(" reinner "|" ident ")"
//! reinner  := ("0"|"1"|ident) ("+" ident)*
//! ```
//!
//! `y/n` is binomial successes over trials, a bare `y` is Bernoulli. The
//! fixed intercept is implicit unless suppressed with `0`. Inside a random
//! term the intercept is likewise implicit unless the term starts with `0`.

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

pub const INTERCEPT: &str = "(Intercept)";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormulaError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("duplicate term `{0}`")]
    DuplicateTerm(String),
    #[error("random-effect covariate `{covariate}` (grouped by `{group}`) is absent from the fixed terms")]
    MissingFixedCovariate { covariate: String, group: String },
    #[error("formula has no fixed-effect terms")]
    NoFixedTerms,
    #[error("random-effect term grouped by `{0}` has no covariates")]
    EmptyRandomTerm(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("trials column `{0}` is the same as the response column")]
    TrialsIsResponse(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trials {
    /// Bernoulli outcomes, n_i = 1.
    One,
    Column(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FixedTerm {
    Intercept,
    Column(String),
}

impl FixedTerm {
    pub fn name(&self) -> &str {
        match self {
            FixedTerm::Intercept => INTERCEPT,
            FixedTerm::Column(c) => c,
        }
    }
}

/// One `( inner | group )` term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReTerm {
    pub intercept: bool,
    pub covariates: Vec<String>,
    pub group: String,
}

impl ReTerm {
    /// Covariates in stacking order: intercept first, then slopes.
    pub fn terms(&self) -> Vec<FixedTerm> {
        let mut out = Vec::with_capacity(self.dim());
        if self.intercept {
            out.push(FixedTerm::Intercept);
        }
        out.extend(self.covariates.iter().cloned().map(FixedTerm::Column));
        out
    }

    pub fn dim(&self) -> usize {
        self.covariates.len() + usize::from(self.intercept)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelFormula {
    pub response: String,
    pub trials: Trials,
    pub fixed: Vec<FixedTerm>,
    pub re_terms: Vec<ReTerm>,
}

impl ModelFormula {
    pub fn has_intercept(&self) -> bool {
        self.fixed.contains(&FixedTerm::Intercept)
    }

    /// Every data column the formula references, response first.
    pub fn columns(&self) -> Vec<&str> {
        let mut cols = vec![self.response.as_str()];
        if let Trials::Column(t) = &self.trials {
            cols.push(t);
        }
        for term in &self.fixed {
            if let FixedTerm::Column(c) = term {
                cols.push(c);
            }
        }
        for re in &self.re_terms {
            cols.push(&re.group);
        }
        cols
    }

    fn check_invariants(&self) -> Result<(), FormulaError> {
        if self.fixed.is_empty() {
            return Err(FormulaError::NoFixedTerms);
        }
        let mut seen = HashSet::new();
        for term in &self.fixed {
            if !seen.insert(term) {
                return Err(FormulaError::DuplicateTerm(term.name().to_string()));
            }
        }
        let mut pairs = HashSet::new();
        for re in &self.re_terms {
            if re.dim() == 0 {
                return Err(FormulaError::EmptyRandomTerm(re.group.clone()));
            }
            for term in re.terms() {
                if !pairs.insert((term.clone(), re.group.clone())) {
                    return Err(FormulaError::DuplicateTerm(format!(
                        "{} | {}",
                        term.name(),
                        re.group
                    )));
                }
                if !self.fixed.contains(&term) {
                    return Err(FormulaError::MissingFixedCovariate {
                        covariate: term.name().to_string(),
                        group: re.group.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for ModelFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.response)?;
        if let Trials::Column(t) = &self.trials {
            write!(f, "/{t}")?;
        }
        write!(f, " ~ ")?;
        let mut parts: Vec<String> = Vec::new();
        if !self.has_intercept() {
            parts.push("0".into());
        }
        for term in &self.fixed {
            parts.push(match term {
                FixedTerm::Intercept => "1".into(),
                FixedTerm::Column(c) => c.clone(),
            });
        }
        for re in &self.re_terms {
            let mut inner = vec![if re.intercept { "1" } else { "0" }.to_string()];
            inner.extend(re.covariates.iter().cloned());
            parts.push(format!("({} | {})", inner.join(" + "), re.group));
        }
        write!(f, "{}", parts.join(" + "))
    }
}

/// A formula whose columns have been checked against a data header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckedFormula(ModelFormula);

impl CheckedFormula {
    pub fn formula(&self) -> &ModelFormula {
        &self.0
    }

    pub fn into_inner(self) -> ModelFormula {
        self.0
    }

    /// Columns treated as categorical grouping factors.
    pub fn grouping_columns(&self) -> Vec<&str> {
        self.0.re_terms.iter().map(|r| r.group.as_str()).collect()
    }
}

impl std::ops::Deref for CheckedFormula {
    type Target = ModelFormula;

    fn deref(&self) -> &ModelFormula {
        &self.0
    }
}

pub fn validate_against_header<S: AsRef<str>>(
    formula: ModelFormula,
    header: &[S],
) -> Result<CheckedFormula, FormulaError> {
    let names: HashSet<&str> = header.iter().map(|h| h.as_ref()).collect();
    for col in formula.columns() {
        if !names.contains(col) {
            return Err(FormulaError::UnknownColumn(col.to_string()));
        }
    }
    if let Trials::Column(t) = &formula.trials {
        if *t == formula.response {
            return Err(FormulaError::TrialsIsResponse(t.clone()));
        }
    }
    Ok(CheckedFormula(formula))
}

#[derive(Debug, Clone, PartialEq)]
enum Tok<'a> {
    Ident(&'a str),
    Zero,
    One,
    Plus,
    Tilde,
    Slash,
    LParen,
    RParen,
    Bar,
    End,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn next(&mut self) -> Result<(usize, Tok<'a>), FormulaError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&b) = bytes.get(start) else {
            return Ok((start, Tok::End));
        };
        let single = match b {
            b'+' => Some(Tok::Plus),
            b'~' => Some(Tok::Tilde),
            b'/' => Some(Tok::Slash),
            b'(' => Some(Tok::LParen),
            b')' => Some(Tok::RParen),
            b'|' => Some(Tok::Bar),
            _ => None,
        };
        if let Some(tok) = single {
            self.pos += 1;
            return Ok((start, tok));
        }
        let is_word = |c: u8| c.is_ascii_alphanumeric() || c == b'_' || c == b'.';
        if !is_word(b) {
            return Err(FormulaError::Syntax {
                offset: start,
                message: format!("unexpected character `{}`", self.src[start..].chars().next().unwrap()),
            });
        }
        while self.pos < bytes.len() && is_word(bytes[self.pos]) {
            self.pos += 1;
        }
        let word = &self.src[start..self.pos];
        if b.is_ascii_digit() {
            return match word {
                "0" => Ok((start, Tok::Zero)),
                "1" => Ok((start, Tok::One)),
                _ => Err(FormulaError::Syntax {
                    offset: start,
                    message: format!("numeric term `{word}` (only 0 and 1 are allowed)"),
                }),
            };
        }
        Ok((start, Tok::Ident(word)))
    }
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    peeked: Option<(usize, Tok<'a>)>,
}

impl<'a> Parser<'a> {
    fn peek(&mut self) -> Result<&(usize, Tok<'a>), FormulaError> {
        if self.peeked.is_none() {
            self.peeked = Some(self.lexer.next()?);
        }
        Ok(self.peeked.as_ref().unwrap())
    }

    fn bump(&mut self) -> Result<(usize, Tok<'a>), FormulaError> {
        match self.peeked.take() {
            Some(t) => Ok(t),
            None => self.lexer.next(),
        }
    }

    fn expect(&mut self, want: Tok<'static>, what: &str) -> Result<(), FormulaError> {
        let (offset, tok) = self.bump()?;
        if tok == want {
            Ok(())
        } else {
            Err(FormulaError::Syntax { offset, message: format!("expected {what}") })
        }
    }

    fn ident(&mut self, what: &str) -> Result<&'a str, FormulaError> {
        match self.bump()? {
            (_, Tok::Ident(s)) => Ok(s),
            (offset, _) => Err(FormulaError::Syntax { offset, message: format!("expected {what}") }),
        }
    }
}

pub fn parse_formula(text: &str) -> Result<ModelFormula, FormulaError> {
    let mut p = Parser { lexer: Lexer { src: text, pos: 0 }, peeked: None };

    let response = p.ident("response column name")?.to_string();
    let trials = if p.peek()?.1 == Tok::Slash {
        p.bump()?;
        Trials::Column(p.ident("trials column name")?.to_string())
    } else {
        Trials::One
    };
    p.expect(Tok::Tilde, "`~`")?;

    let mut fixed = Vec::new();
    let mut re_terms = Vec::new();
    let mut suppress: Option<usize> = None;
    let mut explicit: Option<usize> = None;
    loop {
        let (offset, tok) = p.bump()?;
        match tok {
            Tok::Zero => {
                if explicit.is_some() {
                    return Err(FormulaError::Syntax { offset, message: "`0` conflicts with `1`".into() });
                }
                suppress = Some(offset);
            }
            Tok::One => {
                if suppress.is_some() {
                    return Err(FormulaError::Syntax { offset, message: "`1` conflicts with `0`".into() });
                }
                if explicit.is_some() {
                    return Err(FormulaError::DuplicateTerm(INTERCEPT.into()));
                }
                explicit = Some(offset);
                fixed.push(FixedTerm::Intercept);
            }
            Tok::Ident(name) => fixed.push(FixedTerm::Column(name.to_string())),
            Tok::LParen => re_terms.push(parse_re_inner(&mut p)?),
            _ => return Err(FormulaError::Syntax { offset, message: "expected a term".into() }),
        }
        match p.bump()? {
            (_, Tok::Plus) => continue,
            (_, Tok::End) => break,
            (offset, _) => {
                return Err(FormulaError::Syntax { offset, message: "expected `+` or end of formula".into() })
            }
        }
    }
    if suppress.is_none() && explicit.is_none() {
        fixed.insert(0, FixedTerm::Intercept);
    }

    let formula = ModelFormula { response, trials, fixed, re_terms };
    formula.check_invariants()?;
    Ok(formula)
}

fn parse_re_inner(p: &mut Parser<'_>) -> Result<ReTerm, FormulaError> {
    let mut intercept = true;
    let mut covariates = Vec::new();
    match p.bump()? {
        (_, Tok::Zero) => intercept = false,
        (_, Tok::One) => {}
        (_, Tok::Ident(name)) => covariates.push(name.to_string()),
        (offset, _) => {
            return Err(FormulaError::Syntax { offset, message: "expected `0`, `1` or a covariate".into() })
        }
    }
    while p.peek()?.1 == Tok::Plus {
        p.bump()?;
        covariates.push(p.ident("random-effect covariate")?.to_string());
    }
    p.expect(Tok::Bar, "`|`")?;
    let group = p.ident("grouping factor")?.to_string();
    p.expect(Tok::RParen, "`)`")?;
    Ok(ReTerm { intercept, covariates, group })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(s: &str) -> FixedTerm {
        FixedTerm::Column(s.into())
    }

    #[test]
    fn random_intercept_model() {
        let f = parse_formula("y/n ~ 1 + inc + (1 | state)").unwrap();
        assert_eq!(f.response, "y");
        assert_eq!(f.trials, Trials::Column("n".into()));
        assert_eq!(f.fixed, vec![FixedTerm::Intercept, col("inc")]);
        assert_eq!(
            f.re_terms,
            vec![ReTerm { intercept: true, covariates: vec![], group: "state".into() }]
        );
    }

    #[test]
    fn random_slope_model() {
        let f = parse_formula("y/n ~ 1 + inc + (1 + inc | eth) + (1 | state)").unwrap();
        assert_eq!(f.re_terms.len(), 2);
        assert_eq!(f.re_terms[0].dim(), 2);
        assert_eq!(f.re_terms[0].terms(), vec![FixedTerm::Intercept, col("inc")]);
        assert_eq!(f.re_terms[1].dim(), 1);
    }

    #[test]
    fn implicit_intercept() {
        let f = parse_formula("y ~ (1 | g)").unwrap();
        assert_eq!(f.trials, Trials::One);
        assert_eq!(f.fixed, vec![FixedTerm::Intercept]);
        let f = parse_formula("y ~ x + (x | g)").unwrap();
        assert_eq!(f.fixed, vec![FixedTerm::Intercept, col("x")]);
        assert!(f.re_terms[0].intercept);
    }

    #[test]
    fn re_covariate_must_be_fixed() {
        let err = parse_formula("y ~ 0 + (1+inc|g)").unwrap_err();
        assert!(matches!(err, FormulaError::NoFixedTerms | FormulaError::MissingFixedCovariate { .. }));
        let err = parse_formula("y ~ 0 + x + (1 + inc | g)").unwrap_err();
        assert!(matches!(err, FormulaError::MissingFixedCovariate { .. }));
        let err = parse_formula("y ~ 1 + x + (1 + inc | g)").unwrap_err();
        assert_eq!(
            err,
            FormulaError::MissingFixedCovariate { covariate: "inc".into(), group: "g".into() }
        );
    }

    #[test]
    fn duplicates_rejected() {
        assert!(matches!(parse_formula("y ~ x + x"), Err(FormulaError::DuplicateTerm(_))));
        assert!(matches!(parse_formula("y ~ 1 + 1"), Err(FormulaError::DuplicateTerm(_))));
        assert!(matches!(
            parse_formula("y ~ x + (1 | g) + (1 + x | g)"),
            Err(FormulaError::DuplicateTerm(_))
        ));
        // same covariate under different factors is fine
        assert!(parse_formula("y ~ x + (x | g) + (x | h)").is_ok());
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        match parse_formula("y ~ 1 + 2x") {
            Err(FormulaError::Syntax { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("unexpected {other:?}"),
        }
        match parse_formula("y  1") {
            Err(FormulaError::Syntax { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("unexpected {other:?}"),
        }
        match parse_formula("y ~ (1 | g") {
            Err(FormulaError::Syntax { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_formula("y ~ x * z").is_err());
        assert!(parse_formula("y ~ 0 + 1").is_err());
        assert!(parse_formula("y ~ (0 | g)").is_err());
    }

    #[test]
    fn header_validation() {
        let f = parse_formula("y/n ~ 1 + inc + (1 | state)").unwrap();
        let err = validate_against_header(f.clone(), &["y", "n", "inc"]).unwrap_err();
        assert_eq!(err, FormulaError::UnknownColumn("state".into()));
        let checked = validate_against_header(f.clone(), &["y", "n", "inc", "state"]).unwrap();
        assert_eq!(checked.formula(), &f);
        assert_eq!(checked.grouping_columns(), vec!["state"]);
        let f = parse_formula("y/y ~ 1").unwrap();
        assert_eq!(
            validate_against_header(f, &["y"]).unwrap_err(),
            FormulaError::TrialsIsResponse("y".into())
        );
    }

    fn arb_formula() -> impl Strategy<Value = String> {
        let ident = prop::sample::select(vec!["a", "b", "inc", "x_1", "z.2"]);
        (
            any::<bool>(),
            prop::collection::vec(ident.clone(), 1..4),
            prop::collection::vec((any::<bool>(), prop::sample::select(vec!["g", "h", "k"])), 0..3),
        )
            .prop_map(|(binom, fixed, res)| {
                let mut seen = Vec::new();
                for f in fixed {
                    if !seen.contains(&f) {
                        seen.push(f);
                    }
                }
                let mut parts: Vec<String> = seen.iter().map(|s| s.to_string()).collect();
                let mut groups = Vec::new();
                for (slope, g) in res {
                    if groups.contains(&g) {
                        continue;
                    }
                    groups.push(g);
                    if slope {
                        parts.push(format!("(1 + {} | {g})", seen[0]));
                    } else {
                        parts.push(format!("(1|{g})"));
                    }
                }
                let lhs = if binom { "y/n" } else { "y" };
                format!("{lhs} ~ {}", parts.join(" + "))
            })
    }

    proptest! {
        #[test]
        fn print_parse_is_fixed_point(text in arb_formula()) {
            let parsed = parse_formula(&text).unwrap();
            let printed = parsed.to_string();
            let reparsed = parse_formula(&printed).unwrap();
            prop_assert_eq!(&parsed, &reparsed);
            prop_assert_eq!(printed, reparsed.to_string());
        }
    }
}
