use super::ast::{BinOp, DimSlice, Expr, OrderBy, Projection, Query, UnaryOp};
use super::builtins::Func;
use super::lexer::{tokenize, Tok, Token};
use super::TqlError;

const KEYWORDS: &[&str] = &[
    "SELECT", "FROM", "VERSION", "WHERE", "ORDER", "BY", "ASC", "DESC", "ARRANGE", "LIMIT", "AS", "AND", "OR",
    "NOT", "TRUE", "FALSE",
];

fn keyword(tok: &Tok) -> Option<String> {
    match tok {
        Tok::Ident(s) => {
            let up = s.to_ascii_uppercase();
            KEYWORDS.contains(&up.as_str()).then_some(up)
        }
        _ => None,
    }
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

pub fn parse(text: &str) -> Result<Query, TqlError> {
    let mut p = Parser {
        toks: tokenize(text)?,
        pos: 0,
    };
    let q = p.query()?;
    if p.peek().tok != Tok::Eof {
        return Err(p.unexpected("end of query"));
    }
    Ok(q)
}

/// Parses a standalone expression.
pub fn parse_expr(text: &str) -> Result<Expr, TqlError> {
    let mut p = Parser {
        toks: tokenize(text)?,
        pos: 0,
    };
    let e = p.expr()?;
    if p.peek().tok != Tok::Eof {
        return Err(p.unexpected("end of expression"));
    }
    Ok(e)
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if t.tok != Tok::Eof {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self, wanted: &str) -> TqlError {
        let t = self.peek();
        TqlError::Syntax {
            line: t.line,
            col: t.col,
            message: format!("expected {wanted}, found {}", t.tok.describe()),
        }
    }

    fn at_keyword(&self, kw: &str) -> bool {
        keyword(&self.peek().tok).as_deref() == Some(kw)
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        let hit = self.at_keyword(kw);
        if hit {
            self.pos += 1;
        }
        hit
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), TqlError> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            Err(self.unexpected(kw))
        }
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        let hit = &self.peek().tok == tok;
        if hit {
            self.pos += 1;
        }
        hit
    }

    fn expect(&mut self, tok: Tok) -> Result<(), TqlError> {
        if self.eat(&tok) {
            Ok(())
        } else {
            Err(self.unexpected(&tok.describe()))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, TqlError> {
        match &self.peek().tok {
            Tok::Ident(s) if keyword(&self.peek().tok).is_none() => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn query(&mut self) -> Result<Query, TqlError> {
        self.expect_keyword("SELECT")?;
        let mut projections = vec![self.projection()?];
        while self.eat(&Tok::Comma) {
            projections.push(self.projection()?);
        }
        self.expect_keyword("FROM")?;
        let source = self.ident("dataset name")?;
        let version = if self.eat_keyword("VERSION") {
            match self.next().tok {
                Tok::Str(s) | Tok::Ident(s) => Some(s),
                _ => {
                    self.pos -= 1;
                    return Err(self.unexpected("version string"));
                }
            }
        } else {
            None
        };
        let filter = if self.eat_keyword("WHERE") {
            Some(self.expr()?)
        } else {
            None
        };
        let order_by = if self.eat_keyword("ORDER") {
            self.expect_keyword("BY")?;
            let expr = self.expr()?;
            let descending = if self.eat_keyword("DESC") {
                true
            } else {
                self.eat_keyword("ASC");
                false
            };
            Some(OrderBy { expr, descending })
        } else {
            None
        };
        let arrange_by = if self.eat_keyword("ARRANGE") {
            self.expect_keyword("BY")?;
            Some(self.expr()?)
        } else {
            None
        };
        let limit = if self.eat_keyword("LIMIT") {
            match self.peek().tok {
                Tok::Int(v) if v >= 0 => {
                    self.pos += 1;
                    Some(v as u64)
                }
                _ => return Err(self.unexpected("non-negative row count")),
            }
        } else {
            None
        };
        Ok(Query {
            projections,
            source,
            version,
            filter,
            order_by,
            arrange_by,
            limit,
        })
    }

    fn projection(&mut self) -> Result<Projection, TqlError> {
        let expr = self.expr()?;
        let alias = if self.eat_keyword("AS") {
            Some(self.ident("alias")?)
        } else {
            None
        };
        Ok(Projection { expr, alias })
    }

    fn expr(&mut self) -> Result<Expr, TqlError> {
        self.or()
    }

    fn or(&mut self) -> Result<Expr, TqlError> {
        let mut lhs = self.and()?;
        while self.eat_keyword("OR") {
            lhs = Expr::binary(BinOp::Or, lhs, self.and()?);
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, TqlError> {
        let mut lhs = self.not()?;
        while self.eat_keyword("AND") {
            lhs = Expr::binary(BinOp::And, lhs, self.not()?);
        }
        Ok(lhs)
    }

    fn not(&mut self) -> Result<Expr, TqlError> {
        if self.eat_keyword("NOT") {
            return Ok(Expr::unary(UnaryOp::Not, self.not()?));
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Expr, TqlError> {
        let lhs = self.additive()?;
        let op = match self.peek().tok {
            Tok::Eq => BinOp::Eq,
            Tok::Ne => BinOp::Ne,
            Tok::Lt => BinOp::Lt,
            Tok::Le => BinOp::Le,
            Tok::Gt => BinOp::Gt,
            Tok::Ge => BinOp::Ge,
            _ => return Ok(lhs),
        };
        self.pos += 1;
        Ok(Expr::binary(op, lhs, self.additive()?))
    }

    fn additive(&mut self) -> Result<Expr, TqlError> {
        let mut lhs = self.multiplicative()?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            lhs = Expr::binary(op, lhs, self.multiplicative()?);
        }
    }

    fn multiplicative(&mut self) -> Result<Expr, TqlError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            lhs = Expr::binary(op, lhs, self.unary()?);
        }
    }

    fn unary(&mut self) -> Result<Expr, TqlError> {
        if self.eat(&Tok::Minus) {
            return Ok(match self.unary()? {
                Expr::Int(v) => Expr::Int(v.wrapping_neg()),
                Expr::Float(v) => Expr::Float(-v),
                e => Expr::unary(UnaryOp::Neg, e),
            });
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<Expr, TqlError> {
        let mut e = self.primary()?;
        while self.eat(&Tok::LBracket) {
            let mut dims = vec![self.dim()?];
            while self.eat(&Tok::Comma) {
                dims.push(self.dim()?);
            }
            self.expect(Tok::RBracket)?;
            e = Expr::Index {
                target: Box::new(e),
                dims,
            };
        }
        Ok(e)
    }

    fn int(&mut self) -> Option<i64> {
        let neg = self.peek().tok == Tok::Minus && matches!(self.toks[self.pos + 1].tok, Tok::Int(_));
        if neg {
            self.pos += 1;
        }
        match self.peek().tok {
            Tok::Int(v) => {
                self.pos += 1;
                Some(if neg { -v } else { v })
            }
            _ => None,
        }
    }

    fn dim(&mut self) -> Result<DimSlice, TqlError> {
        let start = self.int();
        if self.eat(&Tok::Colon) {
            let stop = self.int();
            return Ok(DimSlice::Range { start, stop });
        }
        start.map(DimSlice::At).ok_or_else(|| self.unexpected("index or slice"))
    }

    fn primary(&mut self) -> Result<Expr, TqlError> {
        let t = self.peek().clone();
        if let Some(kw) = keyword(&t.tok) {
            return match kw.as_str() {
                "TRUE" => {
                    self.pos += 1;
                    Ok(Expr::Bool(true))
                }
                "FALSE" => {
                    self.pos += 1;
                    Ok(Expr::Bool(false))
                }
                _ => Err(self.unexpected("expression")),
            };
        }
        match t.tok {
            Tok::Int(v) => {
                self.pos += 1;
                Ok(Expr::Int(v))
            }
            Tok::Float(v) => {
                self.pos += 1;
                Ok(Expr::Float(v))
            }
            Tok::Str(s) => {
                self.pos += 1;
                Ok(Expr::Str(s))
            }
            Tok::LParen => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::LBracket => {
                self.pos += 1;
                let mut items = Vec::new();
                if !self.eat(&Tok::RBracket) {
                    items.push(self.expr()?);
                    while self.eat(&Tok::Comma) {
                        items.push(self.expr()?);
                    }
                    self.expect(Tok::RBracket)?;
                }
                Ok(Expr::Array(items))
            }
            Tok::Ident(name) => {
                self.pos += 1;
                if self.peek().tok != Tok::LParen {
                    return Ok(Expr::Tensor(name));
                }
                let func = Func::from_name(&name).ok_or(TqlError::UnknownFunction {
                    name: name.clone(),
                    line: t.line,
                    col: t.col,
                })?;
                self.pos += 1;
                let mut args = Vec::new();
                if !self.eat(&Tok::RParen) {
                    args.push(self.expr()?);
                    while self.eat(&Tok::Comma) {
                        args.push(self.expr()?);
                    }
                    self.expect(Tok::RParen)?;
                }
                Ok(Expr::call(func, args))
            }
            _ => Err(self.unexpected("expression")),
        }
    }
}
