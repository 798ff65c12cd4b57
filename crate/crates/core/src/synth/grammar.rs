//! Expression vocabulary, generators for each expression form, and an
//! independent resolver that maps a token sequence back to the objects it
//! denotes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Color, Object, ShapeKind, SizeClass};
use crate::error::{Error, Result};

pub const VOCAB: [&str; 24] = [
    "the", "small", "large", "red", "green", "blue", "yellow", "circle", "square", "triangle",
    "that", "is", "to", "left", "right", "of", "above", "below", "and", "first", "second",
    "from", "top", "bottom",
];

/// Minimum centre separation, in pixels, for a spatial relation or ordering
/// to hold.
const RELATION_MARGIN: f64 = 3.0;

pub fn vocabulary() -> Vec<String> {
    VOCAB.iter().map(|s| s.to_string()).collect()
}

pub fn token_id(word: &str) -> Option<usize> {
    VOCAB.iter().position(|&w| w == word)
}

fn ids(words: &[&str]) -> Vec<usize> {
    words
        .iter()
        .map(|w| token_id(w).expect("generator emits vocabulary words"))
        .collect()
}

fn size_word(s: SizeClass) -> &'static str {
    match s {
        SizeClass::Small => "small",
        SizeClass::Large => "large",
    }
}

fn color_word(c: Color) -> &'static str {
    match c {
        Color::Red => "red",
        Color::Green => "green",
        Color::Blue => "blue",
        Color::Yellow => "yellow",
    }
}

fn shape_word(s: ShapeKind) -> &'static str {
    match s {
        ShapeKind::Circle => "circle",
        ShapeKind::Square => "square",
        ShapeKind::Triangle => "triangle",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    fn holds(self, a: &Object, b: &Object) -> bool {
        let (dx, dy) = (b.center.0 - a.center.0, b.center.1 - a.center.1);
        match self {
            Self::LeftOf => dx > RELATION_MARGIN,
            Self::RightOf => -dx > RELATION_MARGIN,
            Self::Above => dy > RELATION_MARGIN,
            Self::Below => -dy > RELATION_MARGIN,
        }
    }

    fn words(self) -> &'static [&'static str] {
        match self {
            Self::LeftOf => &["to", "the", "left", "of"],
            Self::RightOf => &["to", "the", "right", "of"],
            Self::Above => &["above"],
            Self::Below => &["below"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Left,
    Right,
    Top,
    Bottom,
}

#[derive(Debug, Clone, PartialEq)]
struct NounPhrase {
    ordinal: Option<(usize, Direction)>,
    size: Option<SizeClass>,
    color: Option<Color>,
    shape: ShapeKind,
}

impl NounPhrase {
    fn plain(size: Option<SizeClass>, color: Option<Color>, shape: ShapeKind) -> Self {
        Self {
            ordinal: None,
            size,
            color,
            shape,
        }
    }

    fn matches(&self, o: &Object) -> bool {
        o.shape == self.shape
            && self.size.map_or(true, |s| s == o.size)
            && self.color.map_or(true, |c| c == o.color)
    }

    fn denote(&self, objects: &[Object]) -> Vec<usize> {
        let mut hits: Vec<usize> = (0..objects.len()).filter(|&i| self.matches(&objects[i])).collect();
        if let Some((rank, dir)) = self.ordinal {
            let key = |i: usize| {
                let c = objects[i].center;
                match dir {
                    Direction::Left => c.0,
                    Direction::Right => -c.0,
                    Direction::Top => c.1,
                    Direction::Bottom => -c.1,
                }
            };
            hits.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
            let separated = hits.windows(2).all(|w| key(w[1]) - key(w[0]) > RELATION_MARGIN);
            return match hits.get(rank) {
                Some(&i) if separated => vec![i],
                _ => Vec::new(),
            };
        }
        hits
    }

    fn words(&self) -> Vec<&'static str> {
        let mut out = vec!["the"];
        if let Some((rank, _)) = self.ordinal {
            out.push(if rank == 0 { "first" } else { "second" });
        }
        out.extend(self.size.map(size_word));
        out.extend(self.color.map(color_word));
        out.push(shape_word(self.shape));
        if let Some((_, dir)) = self.ordinal {
            out.extend([
                "from",
                "the",
                match dir {
                    Direction::Left => "left",
                    Direction::Right => "right",
                    Direction::Top => "top",
                    Direction::Bottom => "bottom",
                },
            ]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Expression {
    head: NounPhrase,
    clauses: Vec<(Relation, NounPhrase)>,
    relative: bool,
}

impl Expression {
    fn denote(&self, objects: &[Object]) -> Vec<usize> {
        self.head
            .denote(objects)
            .into_iter()
            .filter(|&x| {
                self.clauses.iter().all(|(rel, np)| {
                    np.denote(objects)
                        .into_iter()
                        .any(|y| y != x && rel.holds(&objects[x], &objects[y]))
                })
            })
            .collect()
    }

    fn words(&self) -> Vec<&'static str> {
        let mut out = self.head.words();
        for (k, (rel, np)) in self.clauses.iter().enumerate() {
            if self.relative {
                out.extend(if k == 0 { &["that", "is"][..] } else { &["and", "is"][..] });
            }
            out.extend(rel.words());
            out.extend(np.words());
        }
        out
    }
}

struct Parser<'a> {
    words: Vec<&'a str>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.words.get(self.pos).copied()
    }

    fn next(&mut self) -> Result<&'a str> {
        let w = self.peek().ok_or_else(|| Error::format("expression", "unexpected end"))?;
        self.pos += 1;
        Ok(w)
    }

    fn expect(&mut self, word: &str) -> Result<()> {
        let w = self.next()?;
        if w == word {
            Ok(())
        } else {
            Err(Error::format(
                "expression",
                format!("expected `{word}` at {}, found `{w}`", self.pos - 1),
            ))
        }
    }

    fn eat(&mut self, word: &str) -> bool {
        if self.peek() == Some(word) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn noun_phrase(&mut self) -> Result<NounPhrase> {
        self.expect("the")?;
        let rank = if self.eat("first") {
            Some(0)
        } else if self.eat("second") {
            Some(1)
        } else {
            None
        };
        let size = match self.peek() {
            Some("small") => Some(SizeClass::Small),
            Some("large") => Some(SizeClass::Large),
            _ => None,
        };
        if size.is_some() {
            self.pos += 1;
        }
        let color = Color::ALL.into_iter().find(|&c| self.peek() == Some(color_word(c)));
        if color.is_some() {
            self.pos += 1;
        }
        let word = self.next()?;
        let shape = ShapeKind::ALL
            .into_iter()
            .find(|&s| shape_word(s) == word)
            .ok_or_else(|| Error::format("expression", format!("`{word}` is not a shape")))?;
        let ordinal = match rank {
            None => None,
            Some(r) => {
                self.expect("from")?;
                self.expect("the")?;
                let dir = match self.next()? {
                    "left" => Direction::Left,
                    "right" => Direction::Right,
                    "top" => Direction::Top,
                    "bottom" => Direction::Bottom,
                    w => return Err(Error::format("expression", format!("`{w}` is not a direction"))),
                };
                Some((r, dir))
            }
        };
        Ok(NounPhrase {
            ordinal,
            size,
            color,
            shape,
        })
    }

    fn relation(&mut self) -> Result<Relation> {
        match self.next()? {
            "above" => Ok(Relation::Above),
            "below" => Ok(Relation::Below),
            "to" => {
                self.expect("the")?;
                let rel = match self.next()? {
                    "left" => Relation::LeftOf,
                    "right" => Relation::RightOf,
                    w => return Err(Error::format("expression", format!("`{w}` after `to the`"))),
                };
                self.expect("of")?;
                Ok(rel)
            }
            w => Err(Error::format("expression", format!("`{w}` is not a relation"))),
        }
    }

    fn expression(&mut self) -> Result<Expression> {
        let head = self.noun_phrase()?;
        let mut clauses = Vec::new();
        let relative = self.eat("that");
        if relative {
            self.expect("is")?;
            loop {
                let rel = self.relation()?;
                clauses.push((rel, self.noun_phrase()?));
                if !self.eat("and") {
                    break;
                }
                self.expect("is")?;
            }
        } else if self.peek().is_some() {
            let rel = self.relation()?;
            clauses.push((rel, self.noun_phrase()?));
        }
        if let Some(w) = self.peek() {
            return Err(Error::format("expression", format!("trailing `{w}`")));
        }
        Ok(Expression {
            head,
            clauses,
            relative,
        })
    }
}

/// Indices of the objects an expression denotes, in ascending order.
pub fn resolve(tokens: &[usize], objects: &[Object]) -> Result<Vec<usize>> {
    if tokens.is_empty() {
        return Err(Error::EmptyExpression);
    }
    let words = tokens
        .iter()
        .map(|&t| {
            VOCAB
                .get(t)
                .copied()
                .ok_or_else(|| Error::format("expression", format!("token id {t} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    let expr = Parser { words, pos: 0 }.expression()?;
    Ok(expr.denote(objects))
}

fn unique(expr: &Expression, objects: &[Object], referent: usize) -> bool {
    expr.denote(objects) == [referent]
}

/// The shortest attribute phrase naming `target` uniquely, trying colour
/// before size.
fn describe(objects: &[Object], target: usize) -> Option<NounPhrase> {
    let o = &objects[target];
    [
        NounPhrase::plain(None, Some(o.color), o.shape),
        NounPhrase::plain(Some(o.size), None, o.shape),
        NounPhrase::plain(Some(o.size), Some(o.color), o.shape),
        NounPhrase::plain(None, None, o.shape),
    ]
    .into_iter()
    .find(|np| np.denote(objects) == [target])
}

fn relations_between(a: &Object, b: &Object) -> Vec<Relation> {
    [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below]
        .into_iter()
        .filter(|r| r.holds(a, b))
        .collect()
}

pub(super) fn attribute(objects: &[Object], referent: usize) -> Option<Vec<usize>> {
    let expr = Expression {
        head: describe(objects, referent)?,
        clauses: Vec::new(),
        relative: false,
    };
    Some(ids(&expr.words()))
}

pub(super) fn relational(objects: &[Object], referent: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let o = &objects[referent];
    let mut landmarks: Vec<usize> = (0..objects.len()).filter(|&i| i != referent).collect();
    landmarks.shuffle(rng);
    let heads = [
        NounPhrase::plain(None, None, o.shape),
        NounPhrase::plain(None, Some(o.color), o.shape),
    ];
    for y in landmarks {
        let Some(np) = describe(objects, y) else { continue };
        let mut rels = relations_between(o, &objects[y]);
        rels.shuffle(rng);
        for rel in rels {
            for head in &heads {
                let expr = Expression {
                    head: head.clone(),
                    clauses: vec![(rel, np.clone())],
                    relative: rng.gen_bool(0.5),
                };
                if unique(&expr, objects, referent) {
                    return Some(ids(&expr.words()));
                }
            }
        }
    }
    None
}

pub(super) fn ordinal(objects: &[Object], referent: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let o = &objects[referent];
    let mut dirs = [Direction::Left, Direction::Right, Direction::Top, Direction::Bottom];
    dirs.shuffle(rng);
    for dir in dirs {
        for rank in 0..2 {
            let mut head = NounPhrase::plain(None, None, o.shape);
            head.ordinal = Some((rank, dir));
            let expr = Expression {
                head,
                clauses: Vec::new(),
                relative: false,
            };
            // Only worth an ordinal when the shape alone is ambiguous.
            if NounPhrase::plain(None, None, o.shape).denote(objects).len() > 1
                && unique(&expr, objects, referent)
            {
                return Some(ids(&expr.words()));
            }
        }
    }
    None
}

/// Fully specified head, a horizontal relation to a fully specified
/// landmark, and a vertical relation to a shape: always 19 tokens.
pub(super) fn complex(objects: &[Object], referent: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let o = &objects[referent];
    let head = NounPhrase::plain(Some(o.size), Some(o.color), o.shape);
    let mut pairs = Vec::new();
    for a in 0..objects.len() {
        for b in 0..objects.len() {
            if a != referent && b != referent {
                pairs.push((a, b));
            }
        }
    }
    pairs.shuffle(rng);
    for (a, b) in pairs {
        let horizontal = relations_between(o, &objects[a])
            .into_iter()
            .find(|r| matches!(r, Relation::LeftOf | Relation::RightOf));
        let vertical = relations_between(o, &objects[b])
            .into_iter()
            .find(|r| matches!(r, Relation::Above | Relation::Below));
        let (Some(h), Some(v)) = (horizontal, vertical) else { continue };
        let oa = &objects[a];
        let expr = Expression {
            head: head.clone(),
            clauses: vec![
                (h, NounPhrase::plain(Some(oa.size), Some(oa.color), oa.shape)),
                (v, NounPhrase::plain(None, None, objects[b].shape)),
            ],
            relative: true,
        };
        if unique(&expr, objects, referent) {
            return Some(ids(&expr.words()));
        }
    }
    None
}
