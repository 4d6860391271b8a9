//! Tag-structured agent output protocol.
//!
//! A model turn is a sequence of `<kind>body</kind>` segments. A valid
//! assistant turn is exactly one `<think>` segment followed by exactly one
//! action segment (`<search>`, `<code>` or `<answer>`), with only whitespace
//! between and around them. `<information>` blocks are written by the
//! harness, never by the model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Think,
    Search,
    Code,
    Answer,
    Information,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 5] = [
        SegmentKind::Think,
        SegmentKind::Search,
        SegmentKind::Code,
        SegmentKind::Answer,
        SegmentKind::Information,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            SegmentKind::Think => "think",
            SegmentKind::Search => "search",
            SegmentKind::Code => "code",
            SegmentKind::Answer => "answer",
            SegmentKind::Information => "information",
        }
    }

    pub fn open(self) -> String {
        format!("<{}>", self.tag())
    }

    pub fn close(self) -> String {
        format!("</{}>", self.tag())
    }

    /// True for the kinds that end a turn: tool calls and the final answer.
    pub fn is_action(self) -> bool {
        matches!(self, SegmentKind::Search | SegmentKind::Code | SegmentKind::Answer)
    }

    pub fn is_tool_call(self) -> bool {
        matches!(self, SegmentKind::Search | SegmentKind::Code)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub body: String,
}

impl Segment {
    pub fn new(kind: SegmentKind, body: impl Into<String>) -> Self {
        Self { kind, body: body.into() }
    }
}

/// Result of parsing one raw model output. Malformation is recorded here
/// rather than raised.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnParse {
    pub segments: Vec<Segment>,
    pub stray_text: bool,
    pub unclosed: bool,
    pub valid: bool,
}

impl TurnParse {
    /// The action segment that ends the turn, if the turn is valid.
    pub fn action(&self) -> Option<&Segment> {
        if self.valid {
            self.segments.last()
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answer,
    Budget,
    FormatViolation,
    ToolError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub turns: Vec<TurnParse>,
    pub terminated_by: Termination,
}

impl Trajectory {
    /// All segments of all turns, in order.
    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.turns.iter().flat_map(|t| t.segments.iter())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("segment {index} ({kind:?}) body contains protocol delimiter {delimiter:?}")]
    DelimiterInBody { index: usize, kind: SegmentKind, delimiter: String },
}

/// Every opening and closing tag of the protocol.
fn delimiters() -> impl Iterator<Item = (SegmentKind, bool, String)> {
    SegmentKind::ALL.into_iter().flat_map(|k| [(k, true, k.open()), (k, false, k.close())])
}

/// Matches a protocol delimiter at the start of `s`.
fn delimiter_at(s: &str) -> Option<(SegmentKind, bool, usize)> {
    if !s.starts_with('<') {
        return None;
    }
    delimiters()
        .find(|(_, _, d)| s.starts_with(d.as_str()))
        .map(|(k, open, d)| (k, open, d.len()))
}

/// First protocol delimiter contained in `body`, if any.
pub fn find_delimiter(body: &str) -> Option<String> {
    body.char_indices()
        .filter(|(_, c)| *c == '<')
        .find_map(|(i, _)| delimiter_at(&body[i..]).map(|(_, _, len)| body[i..i + len].to_string()))
}

/// Parses one raw model output, left to right. Never fails.
pub fn parse_turn(text: &str) -> TurnParse {
    let mut segments = Vec::new();
    let mut stray_text = false;
    let mut unclosed = false;
    let mut pos = 0;

    while pos < text.len() {
        let rest = &text[pos..];
        let Some(lt) = rest.find('<') else {
            stray_text |= !rest.trim().is_empty();
            break;
        };
        let Some((kind, is_open, len)) = delimiter_at(&rest[lt..]) else {
            // a '<' that starts no delimiter is ordinary text outside tags
            stray_text |= !rest[..=lt].trim().is_empty();
            pos += lt + 1;
            continue;
        };
        stray_text |= !rest[..lt].trim().is_empty();
        let body_start = pos + lt + len;
        if !is_open {
            // closing tag without an opener
            stray_text = true;
            pos = body_start;
            continue;
        }
        let (body_end, next) = scan_body(text, body_start);
        match next {
            Some((k, false, close_len)) if k == kind => {
                segments.push(Segment::new(kind, &text[body_start..body_end]));
                pos = body_end + close_len;
            }
            // another delimiter, or end of input, before our close tag
            _ => {
                unclosed = true;
                pos = body_end;
            }
        }
    }

    let valid = !stray_text && !unclosed && turn_grammar_ok(&segments);
    TurnParse {
        segments,
        stray_text,
        unclosed,
        valid,
    }
}

/// Scans from `start` to the next protocol delimiter. Returns the body end
/// offset and the delimiter found there (none at end of input).
fn scan_body(text: &str, start: usize) -> (usize, Option<(SegmentKind, bool, usize)>) {
    let mut from = start;
    while let Some(off) = text[from..].find('<') {
        let at = from + off;
        if let Some(d) = delimiter_at(&text[at..]) {
            return (at, Some(d));
        }
        from = at + 1;
    }
    (text.len(), None)
}

fn turn_grammar_ok(segments: &[Segment]) -> bool {
    match segments {
        [think, action] => {
            think.kind == SegmentKind::Think
                && action.kind.is_action()
                && match action.kind {
                    SegmentKind::Search | SegmentKind::Code => !action.body.trim().is_empty(),
                    _ => true,
                }
        }
        _ => false,
    }
}

/// Renders segments back to protocol text with no separators.
pub fn render_turn(segments: &[Segment]) -> Result<String, RenderError> {
    let mut out = String::new();
    for (index, seg) in segments.iter().enumerate() {
        if let Some(delimiter) = find_delimiter(&seg.body) {
            return Err(RenderError::DelimiterInBody {
                index,
                kind: seg.kind,
                delimiter,
            });
        }
        out.push_str(&seg.kind.open());
        out.push_str(&seg.body);
        out.push_str(&seg.kind.close());
    }
    Ok(out)
}

/// True iff every turn is valid and at most one answer appears, as the last
/// segment of the last turn.
pub fn validate_trajectory(traj: &Trajectory) -> bool {
    if !traj.turns.iter().all(|t| t.valid) {
        return false;
    }
    let answers: Vec<(usize, usize)> = traj
        .turns
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| {
            t.segments
                .iter()
                .enumerate()
                .filter(|(_, s)| s.kind == SegmentKind::Answer)
                .map(move |(si, _)| (ti, si))
        })
        .collect();
    match answers.as_slice() {
        [] => true,
        [(ti, si)] => *ti + 1 == traj.turns.len() && *si + 1 == traj.turns[*ti].segments.len(),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use SegmentKind::*;

    fn segs(p: &TurnParse) -> Vec<(SegmentKind, &str)> {
        p.segments.iter().map(|s| (s.kind, s.body.as_str())).collect()
    }

    #[test]
    fn minimal_answer_turn() {
        let p = parse_turn("<think>x</think><answer>Paris</answer>");
        assert_eq!(segs(&p), vec![(Think, "x"), (Answer, "Paris")]);
        assert!(p.valid);
    }

    #[test]
    fn search_turn() {
        let p = parse_turn("<think>a</think><search>capital of France</search>");
        assert_eq!(segs(&p), vec![(Think, "a"), (Search, "capital of France")]);
        assert!(p.valid);
    }

    #[test]
    fn missing_close_tag() {
        let p = parse_turn("<think>a<answer>b</answer>");
        assert!(p.unclosed);
        assert!(!p.valid);
        assert_eq!(segs(&p), vec![(Answer, "b")]);
    }

    #[test]
    fn whitespace_between_tags_is_ignored() {
        let p = parse_turn("  \n<think>a</think>\n\t<code>rotate 90\nsave out</code>\n");
        assert!(p.valid, "{p:?}");
        assert!(!p.stray_text);
    }

    #[test]
    fn stray_text_invalidates() {
        let p = parse_turn("Sure! <think>a</think><answer>b</answer>");
        assert!(p.stray_text);
        assert!(!p.valid);
        let p = parse_turn("<think>a</think><answer>b</answer> done");
        assert!(p.stray_text);
        let p = parse_turn("<think>a</think></search><answer>b</answer>");
        assert!(p.stray_text);
    }

    #[test]
    fn lone_angle_bracket_outside_tags_is_stray() {
        let p = parse_turn("<think>a</think> < <answer>b</answer>");
        assert!(p.stray_text);
        // but fine inside a body
        let p = parse_turn("<think>1 < 2</think><answer>b</answer>");
        assert!(p.valid);
        assert_eq!(p.segments[0].body, "1 < 2");
    }

    #[test]
    fn tags_are_case_sensitive() {
        let p = parse_turn("<Think>a</Think><answer>b</answer>");
        assert!(p.stray_text);
        assert!(!p.valid);
    }

    #[test]
    fn think_only_is_invalid() {
        let p = parse_turn("<think>just thinking</think>");
        assert!(!p.stray_text && !p.unclosed);
        assert!(!p.valid);
    }

    #[test]
    fn grammar_rejects_extra_or_misordered_segments() {
        assert!(!parse_turn("<answer>a</answer><think>t</think>").valid);
        assert!(!parse_turn("<think>t</think><search>q</search><answer>a</answer>").valid);
        assert!(!parse_turn("<think>t</think><think>u</think>").valid);
        assert!(!parse_turn("<think>t</think><information>x</information>").valid);
        assert!(!parse_turn("<think>t</think><search>   </search>").valid);
        assert!(!parse_turn("").valid);
    }

    #[test]
    fn unterminated_body_at_end_of_input() {
        let p = parse_turn("<think>t</think><answer>Paris");
        assert!(p.unclosed);
        assert_eq!(segs(&p), vec![(Think, "t")]);
    }

    #[test]
    fn render_examples() {
        assert_eq!(render_turn(&[Segment::new(Think, "t")]).unwrap(), "<think>t</think>");
        assert_eq!(
            render_turn(&[Segment::new(Think, "t"), Segment::new(Code, "crop 0 0 10 10")]).unwrap(),
            "<think>t</think><code>crop 0 0 10 10</code>"
        );
        assert_eq!(
            render_turn(&[Segment::new(Answer, "a</answer>")]),
            Err(RenderError::DelimiterInBody {
                index: 0,
                kind: Answer,
                delimiter: "</answer>".into()
            })
        );
    }

    fn traj(turns: &[&str]) -> Trajectory {
        Trajectory {
            turns: turns.iter().map(|t| parse_turn(t)).collect(),
            terminated_by: Termination::Answer,
        }
    }

    #[test]
    fn trajectory_validation() {
        assert!(validate_trajectory(&traj(&["<think>a</think><answer>b</answer>"])));
        assert!(validate_trajectory(&traj(&[
            "<think>a</think><search>q</search>",
            "<think>a</think><answer>b</answer>"
        ])));
        assert!(!validate_trajectory(&traj(&[
            "<think>a</think><answer>b</answer>",
            "<think>a</think><answer>b</answer>"
        ])));
        assert!(!validate_trajectory(&traj(&["<think>a</think><answer>b</answer>x"])));
    }

    #[test]
    fn deleting_a_closing_tag_invalidates() {
        let turn = "<think>plan</think><search>eiffel tower</search>";
        for kind in [Think, Search] {
            let broken = turn.replacen(&kind.close(), "", 1);
            assert!(!parse_turn(&broken).valid, "{broken}");
        }
    }
}
