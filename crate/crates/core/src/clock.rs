//! Clock-time spell-out table and its inverse.
//!
//! Hours are spoken as 24-hour cardinals ("17:45" → "seventeen forty five"),
//! minutes as cardinals, `oh <digit>` for 01–09 and `o'clock` for :00. Every
//! spelled form maps back to exactly one HH:MM string.

const UNITS: [&str; 20] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
    "nineteen",
];
const TENS: [&str; 4] = ["twenty", "thirty", "forty", "fifty"];

pub const OCLOCK: &str = "o'clock";

fn cardinal(n: u32) -> String {
    debug_assert!(n < 60);
    if n < 20 {
        UNITS[n as usize].to_string()
    } else {
        let tens = TENS[(n / 10 - 2) as usize];
        match n % 10 {
            0 => tens.to_string(),
            u => format!("{tens} {}", UNITS[u as usize]),
        }
    }
}

/// Parses `H:MM` / `HH:MM` with hour < 24 and minute < 60.
pub fn parse_clock(token: &str) -> Option<(u32, u32)> {
    let (h, m) = token.split_once(':')?;
    if h.is_empty() || h.len() > 2 || m.len() != 2 {
        return None;
    }
    if !h.bytes().chain(m.bytes()).all(|b| b.is_ascii_digit()) {
        return None;
    }
    let (h, m): (u32, u32) = (h.parse().ok()?, m.parse().ok()?);
    (h < 24 && m < 60).then_some((h, m))
}

pub fn format_clock(hour: u32, minute: u32) -> String {
    format!("{hour:02}:{minute:02}")
}

/// Spoken form of a clock time.
pub fn spell_time(hour: u32, minute: u32) -> String {
    let h = cardinal(hour);
    match minute {
        0 => format!("{h} {OCLOCK}"),
        1..=9 => format!("{h} oh {}", UNITS[minute as usize]),
        _ => format!("{h} {}", cardinal(minute)),
    }
}

fn unit_value(w: &str) -> Option<u32> {
    UNITS.iter().position(|u| *u == w).map(|i| i as u32)
}

fn tens_value(w: &str) -> Option<u32> {
    TENS.iter().position(|t| *t == w).map(|i| (i as u32 + 2) * 10)
}

/// Cardinal readings starting at `words[0]`, longest first: (value, words used).
fn cardinals(words: &[&str]) -> Vec<(u32, usize)> {
    let mut out = Vec::with_capacity(2);
    let Some(first) = words.first() else {
        return out;
    };
    if let Some(t) = tens_value(first) {
        if let Some(u) = words.get(1).and_then(|w| unit_value(w)).filter(|u| (1..10).contains(u)) {
            out.push((t + u, 2));
        }
        out.push((t, 1));
    } else if let Some(u) = unit_value(first) {
        out.push((u, 1));
    }
    out
}

fn minute_at(words: &[&str]) -> Option<(u32, usize)> {
    match *words.first()? {
        "o'clock" | "oclock" => return Some((0, 1)),
        "oh" => {
            return words
                .get(1)
                .and_then(|w| unit_value(w))
                .filter(|u| (1..10).contains(u))
                .map(|u| (u, 2))
        }
        _ => {}
    }
    cardinals(words).into_iter().find(|&(v, _)| (10..60).contains(&v))
}

/// Reads a spelled time at the start of `words`. Returns (hour, minute,
/// words consumed).
pub fn read_spelled_time(words: &[&str]) -> Option<(u32, u32, usize)> {
    for (hour, used) in cardinals(words) {
        if hour >= 24 {
            continue;
        }
        if let Some((minute, mused)) = minute_at(&words[used..]) {
            return Some((hour, minute, used + mused));
        }
    }
    None
}
