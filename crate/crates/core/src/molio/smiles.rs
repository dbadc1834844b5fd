//! A kekulized, uncharged SMILES subset.
//!
//! Grammar: organic-subset atoms (`B C N O P S F Cl Br I`), bracket atoms
//! holding a bare element symbol (`[Si]`), bond symbols `- = #`, branches and
//! ring-closure digits `1`-`9`. Hydrogens stay implicit.

use super::graph::{Element, MolGraph};
use super::GraphConfig;
use crate::error::{Error, Result};

const ORGANIC: [Element; 10] = [
    Element::B,
    Element::C,
    Element::N,
    Element::O,
    Element::P,
    Element::S,
    Element::F,
    Element::Cl,
    Element::Br,
    Element::I,
];

const AROMATIC: &[u8] = b"bcnops";

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    cfg: &'a GraphConfig,
    atoms: Vec<usize>,
    bonds: Vec<(usize, usize, usize)>,
    rings: [Option<(usize, Option<usize>)>; 10],
    pending: Option<(usize, usize)>,
    prev: Option<usize>,
    branches: Vec<(usize, usize)>,
    just_opened: bool,
}

impl<'a> Parser<'a> {
    fn bond_channel(&self, order: usize, pos: usize) -> Result<usize> {
        if order > self.cfg.bond_channels {
            return Err(Error::syntax(
                pos,
                format!(
                    "bond order {order} exceeds the {} configured channels",
                    self.cfg.bond_channels
                ),
            ));
        }
        Ok(order - 1)
    }

    fn has_bond(&self, a: usize, b: usize) -> bool {
        self.bonds
            .iter()
            .any(|&(x, y, _)| (x == a && y == b) || (x == b && y == a))
    }

    fn add_atom(&mut self, e: Element, pos: usize) -> Result<()> {
        let kind = self.cfg.vocab.index_of(e).ok_or_else(|| Error::Vocab {
            symbol: e.symbol().to_string(),
        })?;
        let idx = self.atoms.len();
        self.atoms.push(kind);
        if let Some(prev) = self.prev {
            let order = self.pending.take().map_or(1, |(o, _)| o);
            let ch = self.bond_channel(order, pos)?;
            self.bonds.push((prev, idx, ch));
        }
        self.prev = Some(idx);
        self.just_opened = false;
        Ok(())
    }

    fn bracket(&mut self) -> Result<Element> {
        let start = self.pos;
        let close = self.src[start..]
            .iter()
            .position(|&b| b == b']')
            .ok_or_else(|| Error::syntax(start, "unclosed bracket atom"))?;
        let body = &self.src[start + 1..start + close];
        self.pos = start + close + 1;
        match body {
            [] => Err(Error::syntax(start, "empty bracket atom")),
            [first, ..] if AROMATIC.contains(first) => Err(Error::Aromatic {
                symbol: String::from_utf8_lossy(body).into_owned(),
                pos: start + 1,
            }),
            [u] if u.is_ascii_uppercase() => self.element(&body[..1], start + 1),
            [u, l] if u.is_ascii_uppercase() && l.is_ascii_lowercase() => {
                self.element(body, start + 1)
            }
            _ => Err(Error::syntax(
                start + 1,
                "bracket atoms may hold only an element symbol (no charges, isotopes, hydrogens or stereo)",
            )),
        }
    }

    fn element(&self, sym: &[u8], pos: usize) -> Result<Element> {
        let s = std::str::from_utf8(sym).map_err(|_| Error::syntax(pos, "invalid element"))?;
        // Known elements outside the configured vocabulary are caught in add_atom.
        s.parse::<Element>().map_err(|_| Error::Vocab {
            symbol: s.to_string(),
        })
    }

    fn organic(&mut self) -> Result<Element> {
        let pos = self.pos;
        let c = self.src[pos];
        let next = self.src.get(pos + 1).copied();
        let sym: &str = match (c, next) {
            (b'C', Some(b'l')) => "Cl",
            (b'B', Some(b'r')) => "Br",
            _ => std::str::from_utf8(&self.src[pos..pos + 1]).unwrap(),
        };
        self.pos += sym.len();
        match ORGANIC.iter().find(|e| e.symbol() == sym) {
            Some(&e) => Ok(e),
            None => Err(Error::syntax(
                pos,
                format!("'{sym}' is not an organic-subset atom; use brackets"),
            )),
        }
    }

    fn ring(&mut self, digit: usize) -> Result<()> {
        let pos = self.pos;
        self.pos += 1;
        let cur = self
            .prev
            .ok_or_else(|| Error::syntax(pos, "ring closure before any atom"))?;
        let here = self.pending.take().map(|(o, _)| o);
        match self.rings[digit].take() {
            None => self.rings[digit] = Some((cur, here)),
            Some((other, there)) => {
                if other == cur {
                    return Err(Error::syntax(pos, "ring closure onto the same atom"));
                }
                let order = match (here, there) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(Error::syntax(pos, "conflicting ring-closure bond symbols"))
                    }
                    (a, b) => a.or(b).unwrap_or(1),
                };
                if self.has_bond(other, cur) {
                    return Err(Error::syntax(
                        pos,
                        "ring closure duplicates an existing bond",
                    ));
                }
                let ch = self.bond_channel(order, pos)?;
                self.bonds.push((other, cur, ch));
            }
        }
        Ok(())
    }

    fn run(&mut self) -> Result<()> {
        while self.pos < self.src.len() {
            let pos = self.pos;
            let c = self.src[pos];
            match c {
                b'(' => {
                    if self.prev.is_none() {
                        return Err(Error::syntax(pos, "branch before any atom"));
                    }
                    if self.pending.is_some() {
                        return Err(Error::syntax(pos, "bond symbol before branch"));
                    }
                    self.branches.push((self.prev.unwrap(), pos));
                    self.just_opened = true;
                    self.pos += 1;
                }
                b')' => {
                    if self.just_opened {
                        return Err(Error::syntax(pos, "empty branch"));
                    }
                    if self.pending.is_some() {
                        return Err(Error::syntax(pos, "dangling bond at end of branch"));
                    }
                    let (root, _) = self
                        .branches
                        .pop()
                        .ok_or_else(|| Error::syntax(pos, "unmatched ')'"))?;
                    self.prev = Some(root);
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' => {
                    if self.prev.is_none() {
                        return Err(Error::syntax(pos, "bond before any atom"));
                    }
                    if self.pending.is_some() {
                        return Err(Error::syntax(pos, "two consecutive bond symbols"));
                    }
                    let order = match c {
                        b'-' => 1,
                        b'=' => 2,
                        _ => 3,
                    };
                    self.pending = Some((order, pos));
                    self.pos += 1;
                }
                b'1'..=b'9' => {
                    if self.just_opened {
                        return Err(Error::syntax(pos, "ring closure directly after '('"));
                    }
                    self.ring((c - b'0') as usize)?;
                }
                b'[' => {
                    let e = self.bracket()?;
                    self.add_atom(e, pos)?;
                }
                b'A'..=b'Z' => {
                    let e = self.organic()?;
                    self.add_atom(e, pos)?;
                }
                _ if AROMATIC.contains(&c) => {
                    return Err(Error::Aromatic {
                        symbol: (c as char).to_string(),
                        pos,
                    })
                }
                b'.' => {
                    return Err(Error::syntax(
                        pos,
                        "disconnected components are not supported",
                    ))
                }
                b'%' => {
                    return Err(Error::syntax(
                        pos,
                        "two-digit ring closures are not supported",
                    ))
                }
                _ => {
                    return Err(Error::syntax(
                        pos,
                        format!("unexpected character {:?}", c as char),
                    ))
                }
            }
        }
        let end = self.src.len();
        if self.pending.is_some() {
            return Err(Error::syntax(end, "dangling bond"));
        }
        if let Some(&(_, open)) = self.branches.last() {
            return Err(Error::syntax(open, "unclosed branch"));
        }
        if let Some(d) = self.rings.iter().position(Option::is_some) {
            return Err(Error::syntax(end, format!("unclosed ring {d}")));
        }
        if self.atoms.is_empty() {
            return Err(Error::syntax(0, "no atoms"));
        }
        Ok(())
    }
}

/// Parses a SMILES string into a graph whose atoms occupy the first slots.
pub fn parse_smiles(s: &str, cfg: &GraphConfig) -> Result<MolGraph> {
    if s.is_empty() {
        return Err(Error::syntax(0, "empty SMILES"));
    }
    if let Some(pos) = s.bytes().position(|b| !b.is_ascii()) {
        return Err(Error::syntax(pos, "non-ASCII input"));
    }
    let mut p = Parser {
        src: s.as_bytes(),
        pos: 0,
        cfg,
        atoms: Vec::new(),
        bonds: Vec::new(),
        rings: [None; 10],
        pending: None,
        prev: None,
        branches: Vec::new(),
        just_opened: false,
    };
    p.run()?;
    if p.atoms.len() > cfg.max_atoms {
        return Err(Error::TooLarge {
            count: p.atoms.len(),
            max: cfg.max_atoms,
        });
    }
    let mut g = MolGraph::empty(cfg.shape());
    for (i, &k) in p.atoms.iter().enumerate() {
        g.set_atom(i, Some(k));
    }
    for &(a, b, ch) in &p.bonds {
        g.set_bond(a, b, Some(ch));
    }
    Ok(g)
}

fn bond_symbol(channel: usize) -> &'static str {
    match channel {
        0 => "",
        1 => "=",
        2 => "#",
        _ => unreachable!("no SMILES symbol for bond channel {channel}"),
    }
}

/// Writes a connected graph as SMILES, starting from its lowest occupied
/// slot and visiting neighbors in slot order.
pub fn write_smiles(g: &MolGraph, cfg: &GraphConfig) -> Result<String> {
    let comps = g.components();
    match comps.len() {
        0 => return Err(Error::EmptyGraph),
        1 => {}
        n => return Err(Error::Disconnected { components: n }),
    }
    let n = g.n_slots();
    let root = comps[0][0];

    // Pass 1: DFS tree and ring-closure edges.
    let mut order = vec![usize::MAX; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut ring_edges: Vec<(usize, usize)> = Vec::new();
    let mut counter = 0;
    fn dfs(
        g: &MolGraph,
        u: usize,
        parent: Option<usize>,
        order: &mut [usize],
        counter: &mut usize,
        children: &mut [Vec<usize>],
        ring_edges: &mut Vec<(usize, usize)>,
    ) {
        order[u] = *counter;
        *counter += 1;
        for (v, _) in g.neighbors(u).collect::<Vec<_>>() {
            if Some(v) == parent {
                continue;
            }
            if order[v] == usize::MAX {
                children[u].push(v);
                dfs(g, v, Some(u), order, counter, children, ring_edges);
            } else {
                let e = (u.min(v), u.max(v));
                if !ring_edges.contains(&e) {
                    ring_edges.push(e);
                }
            }
        }
    }
    dfs(
        g,
        root,
        None,
        &mut order,
        &mut counter,
        &mut children,
        &mut ring_edges,
    );

    // Opening end is whichever endpoint is written first.
    let mut opens: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut closes: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (idx, &(a, b)) in ring_edges.iter().enumerate() {
        let (first, second) = if order[a] < order[b] { (a, b) } else { (b, a) };
        opens[first].push(idx);
        closes[second].push(idx);
    }
    for list in opens.iter_mut().chain(closes.iter_mut()) {
        list.sort_by_key(|&idx| {
            let (a, b) = ring_edges[idx];
            order[a].max(order[b]) * n + order[a].min(order[b])
        });
    }

    let mut out = String::new();
    let mut digit_of = vec![0u8; ring_edges.len()];
    let mut in_use = [false; 10];
    fn emit(
        g: &MolGraph,
        cfg: &GraphConfig,
        u: usize,
        ctx: &mut EmitCtx<'_>,
        out: &mut String,
    ) -> Result<()> {
        let e = cfg.vocab.element(g.atom(u).expect("occupied slot"));
        if e.is_organic_subset() {
            out.push_str(e.symbol());
        } else {
            out.push('[');
            out.push_str(e.symbol());
            out.push(']');
        }
        for &idx in &ctx.closes[u] {
            let d = ctx.digit_of[idx];
            ctx.in_use[d as usize] = false;
            out.push((b'0' + d) as char);
        }
        for &idx in &ctx.opens[u] {
            let d = (1..10u8)
                .find(|&d| !ctx.in_use[d as usize])
                .ok_or_else(|| Error::syntax(out.len(), "more than 9 simultaneously open rings"))?;
            ctx.in_use[d as usize] = true;
            ctx.digit_of[idx] = d;
            let (a, b) = ctx.ring_edges[idx];
            out.push_str(bond_symbol(g.bond(a, b).unwrap()));
            out.push((b'0' + d) as char);
        }
        let kids = &ctx.children[u];
        for (i, &v) in kids.iter().enumerate() {
            let last = i + 1 == kids.len();
            if !last {
                out.push('(');
            }
            out.push_str(bond_symbol(g.bond(u, v).unwrap()));
            emit(g, cfg, v, ctx, out)?;
            if !last {
                out.push(')');
            }
        }
        Ok(())
    }
    struct EmitCtx<'a> {
        children: &'a [Vec<usize>],
        opens: &'a [Vec<usize>],
        closes: &'a [Vec<usize>],
        ring_edges: &'a [(usize, usize)],
        digit_of: &'a mut [u8],
        in_use: &'a mut [bool; 10],
    }
    let mut ctx = EmitCtx {
        children: &children,
        opens: &opens,
        closes: &closes,
        ring_edges: &ring_edges,
        digit_of: &mut digit_of,
        in_use: &mut in_use,
    };
    emit(g, cfg, root, &mut ctx, &mut out)?;
    Ok(out)
}
