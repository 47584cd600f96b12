use crate::error::{Error, Result};

/// Entity label inventory with the relation roles each label may play.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    pub name: String,
    names: Vec<String>,
    head_capable: Vec<bool>,
    tail_capable: Vec<bool>,
    outside: usize,
}

impl LabelSet {
    pub fn new(name: &str, names: &[&str], heads: &[&str], tails: &[&str], outside: &str) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Precondition("label set has no labels".into()));
        }
        let names: Vec<String> = names.iter().map(|n| n.to_uppercase()).collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Precondition(format!("duplicate label {n}")));
            }
        }
        let find = |n: &str| {
            names
                .iter()
                .position(|x| x.eq_ignore_ascii_case(n))
                .ok_or_else(|| Error::Precondition(format!("label {n} not in set")))
        };
        let outside = find(outside)?;
        let mut head_capable = vec![false; names.len()];
        for h in heads {
            head_capable[find(h)?] = true;
        }
        let mut tail_capable = vec![false; names.len()];
        for t in tails {
            tail_capable[find(t)?] = true;
        }
        Ok(LabelSet {
            name: name.to_string(),
            names,
            head_capable,
            tail_capable,
            outside,
        })
    }

    /// HEADER / QUESTION / ANSWER / OTHER, as in FUNSD and XFUND.
    pub fn xfund() -> Self {
        LabelSet::new(
            "xfund",
            &["HEADER", "QUESTION", "ANSWER", "OTHER"],
            &["QUESTION"],
            &["ANSWER"],
            "OTHER",
        )
        .expect("static label set")
    }

    /// SINGLE / QUESTION / ANSWER / ANSWERNUM plus OTHER as the outside label.
    pub fn indform() -> Self {
        LabelSet::new(
            "indform",
            &["SINGLE", "QUESTION", "ANSWER", "ANSWERNUM", "OTHER"],
            &["QUESTION"],
            &["ANSWER", "ANSWERNUM"],
            "OTHER",
        )
        .expect("static label set")
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "xfund" => Some(LabelSet::xfund()),
            "indform" => Some(LabelSet::indform()),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name_of(&self, label: usize) -> &str {
        &self.names[label]
    }

    /// Case-insensitive lookup.
    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|x| x.eq_ignore_ascii_case(name))
    }

    pub fn outside(&self) -> usize {
        self.outside
    }

    pub fn is_head(&self, label: usize) -> bool {
        self.head_capable[label]
    }

    pub fn is_tail(&self, label: usize) -> bool {
        self.tail_capable[label]
    }

    pub fn tags(&self) -> TagSet {
        TagSet::new(self)
    }
}

/// BIO tags derived from a [`LabelSet`]: `O` first, then `B-X`, `I-X` for
/// every label except the outside one, in label order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagSet {
    names: Vec<String>,
    // label index each tag belongs to (O belongs to the outside label)
    label_of: Vec<usize>,
    begin_of: Vec<Option<usize>>,
    inside_of: Vec<Option<usize>>,
}

impl TagSet {
    fn new(labels: &LabelSet) -> Self {
        let mut names = vec!["O".to_string()];
        let mut label_of = vec![labels.outside()];
        let mut begin_of = vec![None; labels.len()];
        let mut inside_of = vec![None; labels.len()];
        for (l, n) in labels.names().iter().enumerate() {
            if l == labels.outside() {
                continue;
            }
            begin_of[l] = Some(names.len());
            names.push(format!("B-{n}"));
            label_of.push(l);
            inside_of[l] = Some(names.len());
            names.push(format!("I-{n}"));
            label_of.push(l);
        }
        TagSet {
            names,
            label_of,
            begin_of,
            inside_of,
        }
    }

    pub const OUTSIDE: usize = 0;

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, tag: usize) -> &str {
        &self.names[tag]
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn label_of(&self, tag: usize) -> usize {
        self.label_of[tag]
    }

    /// `B-X` for a span label, `O` for the outside label.
    pub fn begin(&self, label: usize) -> usize {
        self.begin_of[label].unwrap_or(Self::OUTSIDE)
    }

    /// `I-X` for a span label, `O` for the outside label.
    pub fn inside(&self, label: usize) -> usize {
        self.inside_of[label].unwrap_or(Self::OUTSIDE)
    }

    pub fn is_begin(&self, tag: usize) -> bool {
        tag != Self::OUTSIDE && self.begin_of[self.label_of[tag]] == Some(tag)
    }

    pub fn is_inside(&self, tag: usize) -> bool {
        tag != Self::OUTSIDE && self.inside_of[self.label_of[tag]] == Some(tag)
    }
}
