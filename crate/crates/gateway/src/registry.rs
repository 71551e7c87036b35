use crate::error::GatewayError;
use crate::wire::ClassInfo;

pub const IRRELEVANT: &str = "Irrelevant";

/// Label classes shown to the annotator. Class 0 is always "Irrelevant";
/// classes `1..=num_relevant` are the task's semantics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassRegistry {
    classes: Vec<ClassInfo>,
    max_classes: usize,
}

impl ClassRegistry {
    pub fn new(num_relevant: usize, max_classes: usize) -> Result<Self, GatewayError> {
        if max_classes < num_relevant + 1 {
            return Err(GatewayError::Invalid(format!(
                "class limit {max_classes} is below the {} built-in classes",
                num_relevant + 1
            )));
        }
        let mut classes = vec![ClassInfo { id: 0, name: IRRELEVANT.to_string() }];
        classes.extend((1..=num_relevant).map(|id| ClassInfo { id, name: format!("semantic {id}") }));
        Ok(ClassRegistry { classes, max_classes })
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn max_classes(&self) -> usize {
        self.max_classes
    }

    pub fn contains(&self, id: usize) -> bool {
        self.classes.iter().any(|c| c.id == id)
    }

    pub fn next_id(&self) -> usize {
        self.classes.iter().map(|c| c.id).max().map_or(0, |m| m + 1)
    }

    /// Copy of the registry with `added` appended, or the reason it cannot be.
    pub fn with_added(&self, added: &[ClassInfo]) -> Result<ClassRegistry, GatewayError> {
        let mut next = self.clone();
        for c in added {
            let name = c.name.trim();
            if name.is_empty() {
                return Err(GatewayError::Invalid(format!("class {} has an empty name", c.id)));
            }
            if next.contains(c.id) {
                return Err(GatewayError::Invalid(format!("class id {} is already registered", c.id)));
            }
            if next.classes.iter().any(|e| e.name == name) {
                return Err(GatewayError::Invalid(format!("class name {name:?} is already registered")));
            }
            if next.classes.len() >= next.max_classes {
                return Err(GatewayError::ClassLimit { max: next.max_classes });
            }
            next.classes.push(ClassInfo { id: c.id, name: name.to_string() });
        }
        Ok(next)
    }
}
