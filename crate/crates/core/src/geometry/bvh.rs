use super::{ray_triangle_intersect, Aabb, Hit, Ray, TriangleMesh, Vec3};
use crate::{Error, Result};

const MAX_LEAF: usize = 4;
/// Boxes are inflated by this much so that flat boxes (axis-aligned walls)
/// never reject a crossing the triangle test accepts.
const BOX_PAD: f64 = 1e-9;

/// A node is a leaf when `count > 0`; its triangles are
/// `order[first..first + count]`. Inner nodes store their left child index
/// in `left_or_first`, the right child is the next slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BvhNode {
    pub bounds: Aabb,
    pub left_or_first: u32,
    pub count: u32,
}

impl BvhNode {
    pub fn is_leaf(&self) -> bool {
        self.count > 0
    }
}

/// Median-split bounding volume hierarchy over triangle centroids.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
}

impl Bvh {
    pub fn build(mesh: &TriangleMesh) -> Result<Self> {
        if mesh.is_empty() {
            return Err(Error::Data("cannot build a BVH over an empty mesh".into()));
        }
        let n = mesh.len();
        let boxes: Vec<Aabb> = (0..n).map(|i| mesh.triangle_bounds(i)).collect();
        let centroids: Vec<Vec3> = boxes.iter().map(Aabb::center).collect();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut nodes = Vec::with_capacity(2 * n.div_ceil(MAX_LEAF));
        nodes.push(BvhNode {
            bounds: Aabb::EMPTY,
            left_or_first: 0,
            count: 0,
        });
        let mut stack = vec![(0usize, 0usize, n)];
        while let Some((node, start, end)) = stack.pop() {
            let slice = &mut order[start..end];
            let bounds = slice
                .iter()
                .fold(Aabb::EMPTY, |b, &i| b.union(boxes[i as usize]));
            let bounds = Aabb {
                min: bounds.min - Vec3::splat(BOX_PAD),
                max: bounds.max + Vec3::splat(BOX_PAD),
            };
            if slice.len() <= MAX_LEAF {
                nodes[node] = BvhNode {
                    bounds,
                    left_or_first: start as u32,
                    count: slice.len() as u32,
                };
                continue;
            }
            let cbounds = slice
                .iter()
                .fold(Aabb::EMPTY, |b, &i| b.grow(centroids[i as usize]));
            let axis = cbounds.extent().max_axis();
            let mid = slice.len() / 2;
            slice.select_nth_unstable_by(mid, |&a, &b| {
                let (ca, cb) = (centroids[a as usize][axis], centroids[b as usize][axis]);
                ca.total_cmp(&cb).then(a.cmp(&b))
            });
            let left = nodes.len();
            let blank = BvhNode {
                bounds: Aabb::EMPTY,
                left_or_first: 0,
                count: 0,
            };
            nodes.push(blank);
            nodes.push(blank);
            nodes[node] = BvhNode {
                bounds,
                left_or_first: left as u32,
                count: 0,
            };
            stack.push((left + 1, start + mid, end));
            stack.push((left, start, start + mid));
        }
        Ok(Self { nodes, order })
    }

    pub fn nodes(&self) -> &[BvhNode] {
        &self.nodes
    }

    /// Triangle index permutation referenced by the leaves.
    pub fn order(&self) -> &[u32] {
        &self.order
    }

    pub fn leaf_triangles(&self, node: &BvhNode) -> &[u32] {
        let first = node.left_or_first as usize;
        &self.order[first..first + node.count as usize]
    }

    /// Maximum root-to-leaf edge count.
    pub fn depth(&self) -> usize {
        fn walk(bvh: &Bvh, i: usize) -> usize {
            let n = &bvh.nodes[i];
            if n.is_leaf() {
                0
            } else {
                let l = n.left_or_first as usize;
                1 + walk(bvh, l).max(walk(bvh, l + 1))
            }
        }
        walk(self, 0)
    }

    /// Nearest hit by `t`; ties broken by the smaller triangle id.
    pub fn raycast(&self, mesh: &TriangleMesh, ray: &Ray) -> Option<Hit> {
        debug_assert_eq!(mesh.len(), self.order.len(), "BVH built from a different mesh");
        let d = ray.direction;
        let inv = Vec3::new(1.0 / d.x, 1.0 / d.y, 1.0 / d.z);
        let mut best: Option<(f64, u32)> = None;
        let mut stack: [u32; 64] = [0; 64];
        let mut sp = 0usize;
        let root = &self.nodes[0];
        if root.bounds.intersect(ray.origin, inv, ray.t_near, ray.t_far).is_none() {
            return None;
        }
        stack[sp] = 0;
        sp += 1;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp] as usize];
            let t_max = best.map_or(ray.t_far, |(t, _)| t);
            if node.bounds.intersect(ray.origin, inv, ray.t_near, t_max).is_none() {
                continue;
            }
            if node.is_leaf() {
                for &tri in self.leaf_triangles(node) {
                    let [a, b, c] = mesh.triangle(tri as usize);
                    if let Some(t) = ray_triangle_intersect(ray, a, b, c) {
                        if better((t, tri), best) {
                            best = Some((t, tri));
                        }
                    }
                }
            } else {
                let l = node.left_or_first;
                let (near, far) = self.child_order(l, ray, inv);
                stack[sp] = far;
                stack[sp + 1] = near;
                sp += 2;
            }
        }
        best.map(|(t, triangle_id)| Hit {
            t,
            triangle_id,
            point: ray.at(t),
        })
    }

    fn child_order(&self, left: u32, ray: &Ray, inv: Vec3) -> (u32, u32) {
        let entry = |i: u32| {
            self.nodes[i as usize]
                .bounds
                .intersect(ray.origin, inv, ray.t_near, ray.t_far)
                .map_or(f64::INFINITY, |(t0, _)| t0)
        };
        if entry(left + 1) < entry(left) {
            (left + 1, left)
        } else {
            (left, left + 1)
        }
    }
}

#[inline]
fn better(cand: (f64, u32), best: Option<(f64, u32)>) -> bool {
    match best {
        None => true,
        Some((t, id)) => cand.0 < t || (cand.0 == t && cand.1 < id),
    }
}

/// Exhaustive nearest-hit search over every triangle.
pub fn raycast_linear(mesh: &TriangleMesh, ray: &Ray) -> Option<Hit> {
    let mut best: Option<(f64, u32)> = None;
    for i in 0..mesh.len() {
        let [a, b, c] = mesh.triangle(i);
        if let Some(t) = ray_triangle_intersect(ray, a, b, c) {
            if better((t, i as u32), best) {
                best = Some((t, i as u32));
            }
        }
    }
    best.map(|(t, triangle_id)| Hit {
        t,
        triangle_id,
        point: ray.at(t),
    })
}

/// A mesh together with its BVH.
#[derive(Debug, Clone)]
pub struct MeshAccel {
    pub mesh: TriangleMesh,
    pub bvh: Bvh,
}

impl MeshAccel {
    pub fn new(mesh: TriangleMesh) -> Result<Self> {
        let bvh = Bvh::build(&mesh)?;
        Ok(Self { mesh, bvh })
    }

    #[inline]
    pub fn raycast(&self, ray: &Ray) -> Option<Hit> {
        self.bvh.raycast(&self.mesh, ray)
    }
}
