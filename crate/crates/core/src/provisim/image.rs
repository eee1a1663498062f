use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ProvisimError;
use crate::digest::Digest;
use crate::fleetmodel::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageKind {
    MinimalOs,
    ServiceContainer,
    JobContainer,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layer {
    pub digest: Digest,
    pub size: u64,
}

impl Layer {
    /// A layer whose digest stands for `content`.
    pub fn of(content: &str, size: u64) -> Self {
        Layer {
            digest: Digest::of_parts([content.as_bytes(), &size.to_le_bytes()]),
            size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageManifest {
    pub id: Digest,
    pub name: String,
    pub kind: ImageKind,
    pub layers: Vec<Layer>,
    pub read_only_root: bool,
    /// Writes land in a memory-backed overlay above the read-only root.
    pub overlay: bool,
}

impl ImageManifest {
    /// Builds a manifest whose id is derived from its name, kind and layers.
    /// Operating system images always get a read-only root with a memory
    /// overlay.
    pub fn new(
        name: impl Into<String>,
        kind: ImageKind,
        layers: Vec<Layer>,
    ) -> Result<Self, ProvisimError> {
        let name = name.into();
        let mut seen = BTreeSet::new();
        if let Some(dup) = layers.iter().find(|l| !seen.insert(l.digest)) {
            return Err(ProvisimError::Scenario(format!(
                "image {name} lists layer {} twice",
                dup.digest
            )));
        }
        let os = kind == ImageKind::MinimalOs;
        let mut parts: Vec<Vec<u8>> =
            vec![name.as_bytes().to_vec(), format!("{kind:?}").into_bytes()];
        parts.extend(layers.iter().map(|l| l.digest.0.to_le_bytes().to_vec()));
        Ok(ImageManifest {
            id: Digest::of_parts(parts),
            name,
            kind,
            layers,
            read_only_root: os,
            overlay: os,
        })
    }

    pub fn total_size(&self) -> u64 {
        self.layers.iter().map(|l| l.size).sum()
    }
}

/// Ingredients of an operating system image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipe {
    pub name: String,
    /// `(content name, size)` of each base layer, bottom first.
    pub base_layers: Vec<(String, u64)>,
    /// Size of the per-node customization layer.
    pub node_layer_size: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildPolicy {
    /// One shared image; nodes are customized through boot parameters.
    Generalized,
    /// A fully customized image for every node.
    PerNode,
    /// One shared base plus a small overlay image per node.
    OverlayPerNode,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuiltImages {
    pub manifests: Vec<ImageManifest>,
    pub overlays: Vec<(NodeId, ImageManifest)>,
}

pub fn build_images(
    policy: BuildPolicy,
    fleet: &[NodeId],
    recipe: &Recipe,
) -> Result<BuiltImages, ProvisimError> {
    if recipe.base_layers.is_empty() {
        return Err(ProvisimError::Scenario(format!(
            "recipe {} has no base layers",
            recipe.name
        )));
    }
    let base: Vec<Layer> = recipe
        .base_layers
        .iter()
        .map(|(c, s)| Layer::of(&format!("{}/{c}", recipe.name), *s))
        .collect();
    let node_layer =
        |n: &NodeId| Layer::of(&format!("{}/node/{n}", recipe.name), recipe.node_layer_size);
    Ok(match policy {
        BuildPolicy::Generalized => BuiltImages {
            manifests: vec![ImageManifest::new(
                recipe.name.clone(),
                ImageKind::MinimalOs,
                base,
            )?],
            overlays: Vec::new(),
        },
        BuildPolicy::PerNode => BuiltImages {
            manifests: fleet
                .iter()
                .map(|n| {
                    let mut layers = base.clone();
                    layers.push(node_layer(n));
                    ImageManifest::new(format!("{}-{n}", recipe.name), ImageKind::MinimalOs, layers)
                })
                .collect::<Result<_, _>>()?,
            overlays: Vec::new(),
        },
        BuildPolicy::OverlayPerNode => BuiltImages {
            manifests: vec![ImageManifest::new(
                recipe.name.clone(),
                ImageKind::MinimalOs,
                base,
            )?],
            overlays: fleet
                .iter()
                .map(|n| {
                    let m = ImageManifest::new(
                        format!("{}-overlay-{n}", recipe.name),
                        ImageKind::MinimalOs,
                        vec![node_layer(n)],
                    )?;
                    Ok((n.clone(), m))
                })
                .collect::<Result<_, ProvisimError>>()?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recipe() -> Recipe {
        Recipe {
            name: "os".into(),
            base_layers: vec![("kernel".into(), 100), ("userland".into(), 400)],
            node_layer_size: 8,
        }
    }

    fn fleet() -> Vec<NodeId> {
        ["n1", "n2", "n3"].map(NodeId::new).to_vec()
    }

    #[test]
    fn build_policies() {
        let g = build_images(BuildPolicy::Generalized, &fleet(), &recipe()).unwrap();
        assert_eq!((g.manifests.len(), g.overlays.len()), (1, 0));
        assert!(g.manifests[0].read_only_root && g.manifests[0].overlay);

        let p = build_images(BuildPolicy::PerNode, &fleet(), &recipe()).unwrap();
        let ids: BTreeSet<Digest> = p.manifests.iter().map(|m| m.id).collect();
        assert_eq!(ids.len(), 3);

        let o = build_images(BuildPolicy::OverlayPerNode, &fleet(), &recipe()).unwrap();
        assert_eq!((o.manifests.len(), o.overlays.len()), (1, 3));
        let base: BTreeSet<Digest> = o.manifests[0].layers.iter().map(|l| l.digest).collect();
        assert!(o
            .overlays
            .iter()
            .all(|(_, m)| m.layers.iter().all(|l| !base.contains(&l.digest))));
    }

    #[test]
    fn duplicate_layers_rejected() {
        let l = Layer::of("x", 1);
        assert!(ImageManifest::new("bad", ImageKind::JobContainer, vec![l.clone(), l]).is_err());
    }
}
