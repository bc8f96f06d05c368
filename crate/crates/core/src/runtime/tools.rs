//! Local tools reachable from real-mode agents through `TOOL:<name>:<arg>`
//! directive lines.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{ToolRegistry, ToolSet};

/// A tool request parsed from one response line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolCall {
    pub tool: usize,
    pub argument: String,
}

/// Every well-formed directive in `text`, in order. Unknown tool names are
/// skipped.
pub fn parse_directives(text: &str, registry: &ToolRegistry) -> Vec<ToolCall> {
    text.lines()
        .filter_map(|line| {
            let rest = line.trim().strip_prefix("TOOL:")?;
            let (name, arg) = rest.split_once(':')?;
            Some(ToolCall {
                tool: registry.index_of(name.trim())?,
                argument: arg.trim().to_string(),
            })
        })
        .collect()
}

struct Parser<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.chars.peek().is_some_and(|c| c.is_whitespace()) {
            self.chars.next();
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.peek().copied()
    }

    fn expr(&mut self) -> Result<f64, String> {
        let mut v = self.term()?;
        loop {
            match self.peek() {
                Some('+') => {
                    self.chars.next();
                    v += self.term()?;
                }
                Some('-' | '\u{2212}') => {
                    self.chars.next();
                    v -= self.term()?;
                }
                _ => return Ok(v),
            }
        }
    }

    fn term(&mut self) -> Result<f64, String> {
        let mut v = self.factor()?;
        loop {
            match self.peek() {
                Some('*' | '\u{00d7}' | 'x') => {
                    self.chars.next();
                    v *= self.factor()?;
                }
                Some('/' | '\u{00f7}') => {
                    self.chars.next();
                    let d = self.factor()?;
                    if d == 0.0 {
                        return Err("division by zero".into());
                    }
                    v /= d;
                }
                _ => return Ok(v),
            }
        }
    }

    fn factor(&mut self) -> Result<f64, String> {
        match self.peek() {
            Some('-' | '\u{2212}') => {
                self.chars.next();
                Ok(-self.factor()?)
            }
            Some('(') => {
                self.chars.next();
                let v = self.expr()?;
                match self.peek() {
                    Some(')') => {
                        self.chars.next();
                        Ok(v)
                    }
                    _ => Err("missing closing parenthesis".into()),
                }
            }
            Some(c) if c.is_ascii_digit() || c == '.' => {
                let mut s = String::new();
                while let Some(&c) = self.chars.peek() {
                    if c.is_ascii_digit() || c == '.' {
                        s.push(c);
                        self.chars.next();
                    } else {
                        break;
                    }
                }
                s.parse().map_err(|_| format!("bad number `{s}`"))
            }
            Some(c) => Err(format!("unexpected `{c}`")),
            None => Err("unexpected end of expression".into()),
        }
    }
}

/// Evaluates `+ - * /` (also `− × ÷`) with parentheses and unary minus.
pub fn evaluate_expression(expr: &str) -> Result<f64, String> {
    let mut p = Parser {
        chars: expr.chars().peekable(),
    };
    let v = p.expr()?;
    match p.peek() {
        None => Ok(v),
        Some(c) => Err(format!("unexpected `{c}`")),
    }
}

/// Tool settings for real mode. Web search and code execution are off
/// unless explicitly enabled, and even then only return a refusal here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToolBox {
    pub lookup: BTreeMap<String, String>,
}

impl Default for ToolBox {
    fn default() -> Self {
        let lookup = [
            ("speed of light", "299792458 m/s"),
            ("boiling point of water", "100 C at sea level"),
            ("days in a leap year", "366"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Self { lookup }
    }
}

impl ToolBox {
    /// Runs one call if `allowed` contains the tool; the result text always
    /// describes what happened, errors included.
    pub fn run(&self, call: &ToolCall, allowed: ToolSet) -> (bool, String) {
        if !allowed.contains(call.tool) {
            return (false, format!("tool {} is not allocated to this agent", call.tool));
        }
        match call.tool {
            ToolRegistry::CALCULATOR => match evaluate_expression(&call.argument) {
                Ok(v) => (true, format!("calculator: {} = {v}", call.argument)),
                Err(e) => (true, format!("calculator error: {e}")),
            },
            ToolRegistry::LOOKUP => match self.lookup.get(&call.argument.to_lowercase()) {
                Some(v) => (true, format!("lookup: {} = {v}", call.argument)),
                None => (true, format!("lookup: no entry for `{}`", call.argument)),
            },
            _ => (true, "this tool is disabled in this deployment".to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn expressions() {
        assert_eq!(evaluate_expression("2 + 3 * 4").unwrap(), 14.0);
        assert_eq!(evaluate_expression("(2 + 3) \u{00d7} 4").unwrap(), 20.0);
        assert_eq!(evaluate_expression("-(6 \u{00f7} 3) \u{2212} 1").unwrap(), -3.0);
        assert!(evaluate_expression("1 / 0").is_err());
        assert!(evaluate_expression("2 +").is_err());
        assert!(evaluate_expression("(1").is_err());
        assert!(evaluate_expression("abc").is_err());
    }

    #[test]
    fn directives() {
        let reg = ToolRegistry::default();
        let calls = parse_directives("thinking\nTOOL:calculator: 2*3\nTOOL:nope:1\nTOOL:lookup:days in a leap year", &reg);
        assert_eq!(calls.len(), 2);
        let tb = ToolBox::default();
        let calc = ToolSet::from_tools(&[ToolRegistry::CALCULATOR]).unwrap();
        assert_eq!(tb.run(&calls[0], calc), (true, "calculator: 2*3 = 6".into()));
        assert!(!tb.run(&calls[1], calc).0);
    }

    #[derive(Debug, Clone)]
    enum E {
        N(i64),
        Op(Box<E>, char, Box<E>),
    }

    fn render(e: &E) -> String {
        match e {
            E::N(n) => n.to_string(),
            E::Op(a, op, b) => format!("({} {op} {})", render(a), render(b)),
        }
    }

    fn reference(e: &E) -> Option<f64> {
        Some(match e {
            E::N(n) => *n as f64,
            E::Op(a, op, b) => {
                let (x, y) = (reference(a)?, reference(b)?);
                match op {
                    '+' => x + y,
                    '-' => x - y,
                    '*' => x * y,
                    _ => {
                        if y == 0.0 {
                            return None;
                        }
                        x / y
                    }
                }
            }
        })
    }

    fn arb_expr() -> impl Strategy<Value = E> {
        (0i64..100).prop_map(E::N).prop_recursive(4, 32, 2, |inner| {
            (inner.clone(), prop::sample::select(vec!['+', '-', '*', '/']), inner)
                .prop_map(|(a, op, b)| E::Op(Box::new(a), op, Box::new(b)))
        })
    }

    proptest! {
        #[test]
        fn calculator_matches_reference(e in arb_expr()) {
            let got = evaluate_expression(&render(&e));
            match reference(&e) {
                Some(v) => prop_assert!((got.unwrap() - v).abs() <= 1e-9 * v.abs().max(1.0)),
                None => prop_assert!(got.is_err()),
            }
        }

        #[test]
        fn calculator_never_panics(s in "[0-9+*/() .x-]{0,24}") {
            let _ = evaluate_expression(&s);
        }
    }
}
