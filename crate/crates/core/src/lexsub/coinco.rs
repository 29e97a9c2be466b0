//! Import adapter for the CoInCo XML release.
//!
//! Each `<sent>` holds raw `<precontext>`/`<postcontext>` text and a
//! `<tokens>` list for the target sentence. Annotated tokens carry a numeric
//! id and a `<substitutions>` list of `<subst lemma=".." freq=".."/>`.

use std::fs;
use std::path::Path;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use crate::error::{Error, Result};
use crate::lexsub::{make_item, write_lexsub, Substitute, SubstitutionItem};
use crate::lm::tokenize;

#[derive(Default)]
struct Token {
    id: String,
    form: String,
    lemma: String,
    pos: String,
    problematic: bool,
    subs: Vec<Substitute>,
}

#[derive(Default)]
struct Sentence {
    pre: String,
    post: String,
    tokens: Vec<Token>,
}

#[derive(Clone, Copy, PartialEq)]
enum Text {
    None,
    Pre,
    Post,
}

fn attr(e: &BytesStart, name: &[u8]) -> Result<Option<String>> {
    for a in e.attributes() {
        let a = a.map_err(|err| Error::Input(format!("bad XML attribute: {err}")))?;
        if a.key.as_ref() == name {
            let v = a
                .unescape_value()
                .map_err(|err| Error::Input(format!("bad XML attribute value: {err}")))?;
            return Ok(Some(v.into_owned()));
        }
    }
    Ok(None)
}

fn token_from(e: &BytesStart) -> Result<Token> {
    Ok(Token {
        id: attr(e, b"id")?.unwrap_or_default(),
        form: attr(e, b"wordform")?.unwrap_or_default(),
        lemma: attr(e, b"lemma")?.unwrap_or_default(),
        pos: attr(e, b"posMASC")?
            .or(attr(e, b"posTT")?)
            .unwrap_or_default()
            .chars()
            .next()
            .map(|c| c.to_ascii_lowercase().to_string())
            .unwrap_or_default(),
        problematic: attr(e, b"problematic")?.as_deref() == Some("yes"),
        subs: Vec::new(),
    })
}

fn sentence_items(s: &Sentence, out: &mut Vec<SubstitutionItem>) {
    let pre = tokenize(&s.pre);
    let mut context = pre.clone();
    context.extend(s.tokens.iter().map(|t| t.form.clone()));
    context.extend(tokenize(&s.post));
    for (i, t) in s.tokens.iter().enumerate() {
        if t.subs.is_empty() || t.problematic || t.id.parse::<u64>().is_err() {
            continue;
        }
        // items that fail basic validation are skipped rather than aborting
        // the import
        if let Ok(item) = make_item(
            format!("coinco-{}", t.id),
            t.form.clone(),
            t.lemma.clone(),
            t.pos.clone(),
            pre.len() + i,
            context.clone(),
            t.subs.clone(),
            false,
        ) {
            out.push(item);
        }
    }
}

pub fn parse_coinco(xml: &str) -> Result<Vec<SubstitutionItem>> {
    let mut reader = Reader::from_str(xml);
    let mut items = Vec::new();
    let mut sent: Option<Sentence> = None;
    let mut text = Text::None;
    loop {
        let ev = reader.read_event().map_err(|e| {
            Error::Input(format!("XML error at byte {}: {e}", reader.buffer_position()))
        })?;
        match ev {
            Event::Start(e) | Event::Empty(e) if sent.is_some() || e.name().as_ref() == b"sent" => {
                let s = sent.get_or_insert_with(Sentence::default);
                match e.name().as_ref() {
                    b"precontext" => text = Text::Pre,
                    b"postcontext" => text = Text::Post,
                    b"token" => s.tokens.push(token_from(&e)?),
                    b"subst" => {
                        if let Some(tok) = s.tokens.last_mut() {
                            let lemma = attr(&e, b"lemma")?.unwrap_or_default();
                            let count = attr(&e, b"freq")?.and_then(|f| f.parse().ok());
                            if !lemma.trim().is_empty() {
                                tok.subs.push(Substitute {
                                    lemma: lemma.trim().to_string(),
                                    count,
                                });
                            }
                        }
                    }
                    _ => {}
                }
            }
            Event::Text(t) => {
                if let Some(s) = sent.as_mut() {
                    let t = t
                        .unescape()
                        .map_err(|e| Error::Input(format!("bad XML text: {e}")))?;
                    match text {
                        Text::Pre => s.pre.push_str(&t),
                        Text::Post => s.post.push_str(&t),
                        Text::None => {}
                    }
                }
            }
            Event::End(e) => match e.name().as_ref() {
                b"precontext" | b"postcontext" => text = Text::None,
                b"sent" => {
                    if let Some(s) = sent.take() {
                        sentence_items(&s, &mut items);
                    }
                }
                _ => {}
            },
            Event::Eof => break,
            _ => {}
        }
    }
    if items.is_empty() {
        return Err(Error::Input("no annotated tokens found in XML".into()));
    }
    Ok(items)
}

/// Converts a CoInCo XML file to the normalized TSV format.
pub fn import_coinco(xml_path: &Path, tsv_path: &Path) -> Result<usize> {
    let xml = fs::read_to_string(xml_path).map_err(|e| Error::io(xml_path, e))?;
    let items = parse_coinco(&xml)?;
    write_lexsub(tsv_path, &items)?;
    Ok(items.len())
}
