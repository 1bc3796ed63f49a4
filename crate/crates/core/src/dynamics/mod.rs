//! Discrete-time rigid-body dynamics with penalty contacts.
//!
//! A world couples a fixed-base kinematic robot tree (position-controlled
//! through per-joint PD with reflected inertia) with at most one free
//! rigid object and static supports. Contact is a spring-damper normal
//! force activated inside the contact margin plus Coulomb-capped smooth
//! friction. A virtual-force hook lets callers pull declared robot/object
//! site pairs toward reference relative positions during search rollouts.

pub mod config;
pub mod geometry;
pub mod scenes;

use std::collections::HashMap;

use nalgebra::{Isometry3, Matrix3, Translation3, UnitQuaternion, UnitVector3, Vector3};
use thiserror::Error;

use crate::types::{ControlSequence, Pose, State};
use geometry::{Contact, Shape, StaticGeom};

/// Divergence guard: any state magnitude beyond this aborts a rollout.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DynamicsError {
    #[error("rollout diverged at step {step}")]
    Diverged { step: usize },
    #[error("unknown site id `{id}`")]
    UnknownSite { id: String },
    #[error("world configuration invalid: {0}")]
    BadWorld(String),
    #[error("control row has {got} entries, world expects {expected}")]
    ControlDim { got: usize, expected: usize },
}

/// Randomizable physics parameters, the set D of the robustifier.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainParams {
    /// Coulomb friction coefficient applied to every contact.
    pub friction_mu: f64,
    /// Multiplier on the object's mass and inertia.
    pub object_mass_scale: f64,
    /// Penetration offset added to contact activation (m).
    pub contact_margin: f64,
    /// Multiplier on contact spring stiffness.
    pub contact_stiffness_scale: f64,
}

impl Default for DomainParams {
    fn default() -> Self {
        Self {
            friction_mu: 0.8,
            object_mass_scale: 1.0,
            contact_margin: 0.0,
            contact_stiffness_scale: 1.0,
        }
    }
}

impl DomainParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let ok = self.friction_mu >= 0.0
            && self.object_mass_scale > 0.0
            && self.contact_margin >= 0.0
            && self.contact_stiffness_scale > 0.0
            && [
                self.friction_mu,
                self.object_mass_scale,
                self.contact_margin,
                self.contact_stiffness_scale,
            ]
            .iter()
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(DynamicsError::BadWorld(format!(
                "domain parameters out of range: {self:?}"
            )))
        }
    }
}

/// Which body a site is attached to.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum SiteBody {
    Robot(usize),
    Object,
    Environment,
}

/// Named point used for contact scheduling and virtual forces.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactSite {
    pub id: String,
    pub body: SiteBody,
    pub local_offset: Vector3<f64>,
}

/// Soft relative-position constraint realized as a spring that only acts
/// beyond the slack radius `sqrt(bound)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualForceCommand {
    pub robot_site: String,
    pub object_site: String,
    /// Desired robot-site position relative to the object site (m).
    pub target_rel_pos: Vector3<f64>,
    /// Constraint slack eta (m^2); zero force while |delta|^2 <= bound.
    pub bound: f64,
    /// Spring stiffness (N/m) on the violation beyond the slack radius.
    pub stiffness: f64,
}

/// External force on a robot site over a control-step window, used by the
/// physics-variation augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedSiteForce {
    pub site: String,
    pub force: Vector3<f64>,
    /// Active for control steps t with start <= t < end.
    pub steps: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    Revolute,
    Prismatic,
}

/// One actuated degree of freedom.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    /// Axis in the frame of the body the joint moves (after its fixed offset).
    pub axis: UnitVector3<f64>,
    pub kp: f64,
    /// Damping gain; built as 2*sqrt(kp*armature) when left unset.
    pub kd: f64,
    /// Reflected inertia (kg or kg m^2).
    pub armature: f64,
    /// Bounds on the setpoint delta, the control set U.
    pub ctrl_range: (f64, f64),
    pub q0: f64,
}

/// Collision geometry attached to a body at a local offset (no local
/// rotation; capsules stay aligned with the body z axis).
#[derive(Debug, Clone, PartialEq)]
pub struct BodyGeom {
    pub shape: Shape,
    pub offset: Vector3<f64>,
}

/// Robot link. Bodies form a tree ordered parent-before-child; `joint`
/// moves this body relative to the parent attachment frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Body {
    pub name: String,
    pub parent: Option<usize>,
    pub joint: Option<usize>,
    /// Fixed transform from the parent body frame to this body's joint frame.
    pub offset: Isometry3<f64>,
    pub mass: f64,
    pub com: Vector3<f64>,
    pub geoms: Vec<BodyGeom>,
}

/// The single free rigid body of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeObject {
    pub name: String,
    pub shape: Shape,
    pub mass: f64,
    pub start: Pose,
}

/// Penalty contact constants (per contact point).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactModel {
    /// Normal spring stiffness per contact point (N/m).
    pub k_normal: f64,
    /// Normal damping coefficient per contact point (N s/m).
    pub damping: f64,
    /// Tangential velocity where the friction force saturates (m/s).
    pub friction_vel_tol: f64,
}

impl Default for ContactModel {
    fn default() -> Self {
        Self {
            k_normal: 500.0,
            damping: 4.0,
            friction_vel_tol: 0.005,
        }
    }
}

/// Outcome of a single control step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub state: State,
    /// Number of virtual-force applications with nonzero magnitude.
    pub virtual_events: usize,
    /// Largest virtual force magnitude applied during the step (N).
    pub virtual_force_max: f64,
}

/// Trace of a full rollout: T+1 states plus the virtual-force log.
#[derive(Debug, Clone)]
pub struct RolloutLog {
    pub states: Vec<State>,
    pub virtual_events: usize,
    pub virtual_force_max: f64,
}

/// Pluggable discrete-time stepper `f(x, u, t; d)`.
///
/// The control row consumed here is the absolute joint-space PD setpoint;
/// composing reference setpoints with optimizer deltas happens upstream.
/// Implementations must be deterministic and reentrant: `step` on the same
/// inputs returns bit-identical outputs at any call interleaving.
pub trait WorldModel: Send + Sync {
    fn n_u(&self) -> usize;
    fn physics_dt(&self) -> f64;
    fn control_dt(&self) -> f64;
    fn nominal_params(&self) -> DomainParams;
    /// Per-joint bounds on setpoint deltas (the control set U).
    fn ctrl_bounds(&self) -> Vec<(f64, f64)>;
    fn site_ids(&self) -> Vec<String>;
    /// World-frame positions of every registered site at state `x`.
    fn site_positions(&self, x: &State) -> HashMap<String, Vector3<f64>>;
    fn initial_state(&self) -> State;
    /// Advances one control step (several physics substeps) from `x` under
    /// PD setpoints `setpoint`, at global control-step index `t`.
    fn step(
        &self,
        x: &State,
        setpoint: &[f64],
        t: usize,
        d: &DomainParams,
        virtual_cmds: &[VirtualForceCommand],
    ) -> Result<StepResult, DynamicsError>;
}

/// Simulates `setpoints` from `x0`, returning all T+1 states. Virtual
/// commands, when provided, are indexed per step. `t_offset` is the global
/// control-step index of `x0`, which windows sliced out of a longer
/// trajectory must pass so timed external forces line up.
pub fn rollout<W: WorldModel + ?Sized>(
    world: &W,
    x0: &State,
    setpoints: &ControlSequence,
    t_offset: usize,
    d: &DomainParams,
    per_step_virtual: Option<&[Vec<VirtualForceCommand>]>,
) -> Result<RolloutLog, DynamicsError> {
    let t_steps = setpoints.t_steps();
    let mut states = Vec::with_capacity(t_steps + 1);
    states.push(x0.clone());
    let mut virtual_events = 0;
    let mut virtual_force_max = 0.0_f64;
    let empty: Vec<VirtualForceCommand> = Vec::new();
    for t in 0..t_steps {
        let cmds = per_step_virtual.map_or(&empty, |v| &v[t]);
        let row = setpoints.row(t);
        let res = world
            .step(&states[t], &row, t_offset + t, d, cmds)
            .map_err(|e| match e {
                DynamicsError::Diverged { .. } => DynamicsError::Diverged { step: t },
                other => other,
            })?;
        virtual_events += res.virtual_events;
        virtual_force_max = virtual_force_max.max(res.virtual_force_max);
        states.push(res.state);
    }
    Ok(RolloutLog {
        states,
        virtual_events,
        virtual_force_max,
    })
}

/// Concrete world: robot tree + optional free object + static supports.
#[derive(Debug, Clone)]
pub struct RigidBodyWorld {
    pub name: String,
    physics_dt: f64,
    control_dt: f64,
    substeps: usize,
    gravity: Vector3<f64>,
    joints: Vec<Joint>,
    bodies: Vec<Body>,
    object: Option<FreeObject>,
    statics: Vec<StaticGeom>,
    sites: Vec<ContactSite>,
    site_index: HashMap<String, usize>,
    contact: ContactModel,
    nominal: DomainParams,
    /// Joints on the ancestor chain of each body, root first.
    chains: Vec<Vec<usize>>,
    pub external_forces: Vec<TimedSiteForce>,
}

/// FK scratch: world pose per body plus per-joint world axis and anchor.
struct Kinematics {
    body_pose: Vec<Isometry3<f64>>,
    joint_axis_w: Vec<Vector3<f64>>,
    joint_anchor_w: Vec<Vector3<f64>>,
}

impl RigidBodyWorld {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: String,
        physics_dt: f64,
        control_dt: f64,
        gravity: Vector3<f64>,
        joints: Vec<Joint>,
        bodies: Vec<Body>,
        object: Option<FreeObject>,
        statics: Vec<StaticGeom>,
        sites: Vec<ContactSite>,
        contact: ContactModel,
        nominal: DomainParams,
    ) -> Result<Self, DynamicsError> {
        if !(physics_dt > 0.0 && control_dt > 0.0) {
            return Err(DynamicsError::BadWorld("timesteps must be positive".into()));
        }
        let ratio = control_dt / physics_dt;
        let substeps = ratio.round() as usize;
        if substeps == 0 || (ratio - substeps as f64).abs() > 1e-9 {
            return Err(DynamicsError::BadWorld(format!(
                "control_dt/physics_dt = {ratio} is not a positive integer"
            )));
        }
        for (i, b) in bodies.iter().enumerate() {
            if let Some(p) = b.parent {
                if p >= i {
                    return Err(DynamicsError::BadWorld(format!(
                        "body `{}` must come after its parent",
                        b.name
                    )));
                }
            }
            if let Some(j) = b.joint {
                if j >= joints.len() {
                    return Err(DynamicsError::BadWorld(format!(
                        "body `{}` references missing joint {j}",
                        b.name
                    )));
                }
            }
        }
        for j in &joints {
            if !(j.armature > 0.0) {
                return Err(DynamicsError::BadWorld(format!(
                    "joint `{}` needs positive armature",
                    j.name
                )));
            }
            if !(j.ctrl_range.0 <= 0.0 && j.ctrl_range.1 >= 0.0) {
                return Err(DynamicsError::BadWorld(format!(
                    "joint `{}` ctrl_range must contain 0",
                    j.name
                )));
            }
        }
        let mut site_index = HashMap::new();
        for (i, s) in sites.iter().enumerate() {
            if site_index.insert(s.id.clone(), i).is_some() {
                return Err(DynamicsError::BadWorld(format!(
                    "duplicate site id `{}`",
                    s.id
                )));
            }
            if let SiteBody::Robot(b) = s.body {
                if b >= bodies.len() {
                    return Err(DynamicsError::BadWorld(format!(
                        "site `{}` references missing body {b}",
                        s.id
                    )));
                }
            }
            if matches!(s.body, SiteBody::Object) && object.is_none() {
                return Err(DynamicsError::BadWorld(format!(
                    "site `{}` references an object this world does not have",
                    s.id
                )));
            }
        }
        // cuboid robot geoms cannot collide with a cuboid object
        if let Some(obj) = &object {
            if matches!(obj.shape, Shape::Cuboid { .. }) {
                for b in &bodies {
                    if b.geoms
                        .iter()
                        .any(|g| matches!(g.shape, Shape::Cuboid { .. }))
                    {
                        return Err(DynamicsError::BadWorld(
                            "cuboid-cuboid contact is unsupported".into(),
                        ));
                    }
                }
            }
        }
        nominal.validate()?;
        let chains = bodies
            .iter()
            .map(|b| {
                let mut chain = Vec::new();
                let mut cur = Some(b);
                while let Some(body) = cur {
                    if let Some(j) = body.joint {
                        chain.push(j);
                    }
                    cur = body.parent.map(|p| &bodies[p]);
                }
                chain.reverse();
                chain
            })
            .collect();
        Ok(Self {
            name,
            physics_dt,
            control_dt,
            substeps,
            gravity,
            joints,
            bodies,
            object,
            statics,
            sites,
            site_index,
            contact,
            nominal,
            chains,
            external_forces: Vec::new(),
        })
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn bodies(&self) -> &[Body] {
        &self.bodies
    }

    pub fn object(&self) -> Option<&FreeObject> {
        self.object.as_ref()
    }

    pub fn object_mut(&mut self) -> Option<&mut FreeObject> {
        self.object.as_mut()
    }

    pub fn statics(&self) -> &[StaticGeom] {
        &self.statics
    }

    pub fn statics_mut(&mut self) -> &mut Vec<StaticGeom> {
        &mut self.statics
    }

    pub fn sites(&self) -> &[ContactSite] {
        &self.sites
    }

    pub fn contact_model(&self) -> &ContactModel {
        &self.contact
    }

    pub fn gravity(&self) -> Vector3<f64> {
        self.gravity
    }

    fn forward_kinematics(&self, q: &[f64]) -> Kinematics {
        let n = self.bodies.len();
        let mut body_pose = Vec::with_capacity(n);
        let mut joint_axis_w = vec![Vector3::zeros(); self.joints.len()];
        let mut joint_anchor_w = vec![Vector3::zeros(); self.joints.len()];
        for (i, body) in self.bodies.iter().enumerate() {
            let parent_pose = body
                .parent
                .map_or_else(Isometry3::identity, |p| body_pose[p]);
            let anchor = parent_pose * body.offset;
            let pose = if let Some(jidx) = body.joint {
                let joint = &self.joints[jidx];
                let motion = match joint.kind {
                    JointKind::Revolute => Isometry3::from_parts(
                        Translation3::identity(),
                        UnitQuaternion::from_axis_angle(&joint.axis, q[jidx]),
                    ),
                    JointKind::Prismatic => Isometry3::from_parts(
                        Translation3::from(joint.axis.into_inner() * q[jidx]),
                        UnitQuaternion::identity(),
                    ),
                };
                joint_axis_w[jidx] = anchor.rotation * joint.axis.into_inner();
                joint_anchor_w[jidx] = anchor.translation.vector;
                anchor * motion
            } else {
                anchor
            };
            debug_assert_eq!(body_pose.len(), i);
            body_pose.push(pose);
        }
        Kinematics {
            body_pose,
            joint_axis_w,
            joint_anchor_w,
        }
    }

    /// Velocity of a world point rigidly attached to robot body `body`.
    fn robot_point_velocity(
        &self,
        kin: &Kinematics,
        body: usize,
        point: Vector3<f64>,
        qd: &[f64],
    ) -> Vector3<f64> {
        let mut v = Vector3::zeros();
        for &j in &self.chains[body] {
            v += self.jacobian_column(kin, j, point) * qd[j];
        }
        v
    }

    fn jacobian_column(&self, kin: &Kinematics, joint: usize, point: Vector3<f64>) -> Vector3<f64> {
        match self.joints[joint].kind {
            JointKind::Prismatic => kin.joint_axis_w[joint],
            JointKind::Revolute => kin.joint_axis_w[joint].cross(&(point - kin.joint_anchor_w[joint])),
        }
    }

    /// Accumulates `force` applied at `point` on robot body `body` into
    /// joint-space torques.
    fn apply_to_joints(
        &self,
        kin: &Kinematics,
        body: usize,
        point: Vector3<f64>,
        force: Vector3<f64>,
        tau: &mut [f64],
    ) {
        for &j in &self.chains[body] {
            tau[j] += self.jacobian_column(kin, j, point).dot(&force);
        }
    }

    fn object_pose_iso(pose: &Pose) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(pose.position), pose.orientation)
    }

    fn site_world(&self, kin: &Kinematics, obj_pose: &Pose, site: &ContactSite) -> Vector3<f64> {
        match site.body {
            SiteBody::Robot(b) => kin.body_pose[b]
                .transform_point(&site.local_offset.into())
                .coords,
            SiteBody::Object => Self::object_pose_iso(obj_pose)
                .transform_point(&site.local_offset.into())
                .coords,
            SiteBody::Environment => site.local_offset,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn contact_forces(
        &self,
        kin: &Kinematics,
        x_obj_pose: &Pose,
        obj_v: Vector3<f64>,
        obj_w: Vector3<f64>,
        qd: &[f64],
        d: &DomainParams,
        tau: &mut [f64],
        obj_force: &mut Vector3<f64>,
        obj_torque: &mut Vector3<f64>,
    ) {
        let k_n = self.contact.k_normal * d.contact_stiffness_scale;
        let c_n = self.contact.damping * d.contact_stiffness_scale.sqrt();
        let margin = d.contact_margin;
        let obj_iso = Self::object_pose_iso(x_obj_pose);
        let obj_com = x_obj_pose.position;
        let mut buf: Vec<Contact> = Vec::new();

        let mut resolve = |contact: &Contact,
                           va: Vector3<f64>,
                           vb: Vector3<f64>,
                           mu: f64|
         -> Option<Vector3<f64>> {
            let phi = margin - contact.dist;
            if phi <= 0.0 {
                return None;
            }
            let n = contact.normal.into_inner();
            let v_rel = vb - va;
            let approach = -v_rel.dot(&n);
            let f_n = (k_n * phi + c_n * approach).max(0.0);
            if f_n == 0.0 {
                return None;
            }
            let v_t = v_rel - n * v_rel.dot(&n);
            let speed = v_t.norm();
            let f_t = if speed > 1e-12 && mu > 0.0 {
                let mag = mu * f_n * (speed / self.contact.friction_vel_tol).min(1.0);
                -v_t / speed * mag
            } else {
                Vector3::zeros()
            };
            Some(n * f_n + f_t)
        };

        // object vs statics
        if let Some(obj) = &self.object {
            for geom in &self.statics {
                buf.clear();
                geometry::static_contacts(&obj.shape, &obj_iso, geom, margin, &mut buf);
                for c in &buf {
                    let vb = obj_v + obj_w.cross(&(c.point - obj_com));
                    if let Some(f) = resolve(c, Vector3::zeros(), vb, d.friction_mu) {
                        *obj_force += f;
                        *obj_torque += (c.point - obj_com).cross(&f);
                    }
                }
            }
        }

        // robot geoms vs object and statics
        for (bi, body) in self.bodies.iter().enumerate() {
            for geom in &body.geoms {
                let gpose = kin.body_pose[bi]
                    * Isometry3::from_parts(
                        Translation3::from(geom.offset),
                        UnitQuaternion::identity(),
                    );
                if let Some(obj) = &self.object {
                    if let Some(c) =
                        geometry::shape_contact(&geom.shape, &gpose, &obj.shape, &obj_iso, margin)
                    {
                        let va = self.robot_point_velocity(kin, bi, c.point, qd);
                        let vb = obj_v + obj_w.cross(&(c.point - obj_com));
                        if let Some(f) = resolve(&c, va, vb, d.friction_mu) {
                            *obj_force += f;
                            *obj_torque += (c.point - obj_com).cross(&f);
                            self.apply_to_joints(kin, bi, c.point, -f, tau);
                        }
                    }
                }
                for sgeom in &self.statics {
                    buf.clear();
                    geometry::static_contacts(&geom.shape, &gpose, sgeom, margin, &mut buf);
                    for c in &buf {
                        let vb = self.robot_point_velocity(kin, bi, c.point, qd);
                        if let Some(f) = resolve(c, Vector3::zeros(), vb, d.friction_mu) {
                            self.apply_to_joints(kin, bi, c.point, f, tau);
                        }
                    }
                }
            }
        }
    }
}

impl WorldModel for RigidBodyWorld {
    fn n_u(&self) -> usize {
        self.joints.len()
    }

    fn physics_dt(&self) -> f64 {
        self.physics_dt
    }

    fn control_dt(&self) -> f64 {
        self.control_dt
    }

    fn nominal_params(&self) -> DomainParams {
        self.nominal
    }

    fn ctrl_bounds(&self) -> Vec<(f64, f64)> {
        self.joints.iter().map(|j| j.ctrl_range).collect()
    }

    fn site_ids(&self) -> Vec<String> {
        self.sites.iter().map(|s| s.id.clone()).collect()
    }

    fn site_positions(&self, x: &State) -> HashMap<String, Vector3<f64>> {
        let q: Vec<f64> = x.joint_pos.iter().copied().collect();
        let kin = self.forward_kinematics(&q);
        self.sites
            .iter()
            .map(|s| (s.id.clone(), self.site_world(&kin, &x.object_pose, s)))
            .collect()
    }

    fn initial_state(&self) -> State {
        let mut s = State::zeros(self.n_u());
        for (i, j) in self.joints.iter().enumerate() {
            s.joint_pos[i] = j.q0;
        }
        if let Some(obj) = &self.object {
            s.object_pose = obj.start;
        }
        s
    }

    fn step(
        &self,
        x: &State,
        setpoint: &[f64],
        t: usize,
        d: &DomainParams,
        virtual_cmds: &[VirtualForceCommand],
    ) -> Result<StepResult, DynamicsError> {
        let n = self.n_u();
        if setpoint.len() != n || x.joint_pos.len() != n {
            return Err(DynamicsError::ControlDim {
                got: setpoint.len().max(x.joint_pos.len()),
                expected: n,
            });
        }
        for cmd in virtual_cmds {
            if !self.site_index.contains_key(&cmd.robot_site) {
                return Err(DynamicsError::UnknownSite {
                    id: cmd.robot_site.clone(),
                });
            }
            if !self.site_index.contains_key(&cmd.object_site) {
                return Err(DynamicsError::UnknownSite {
                    id: cmd.object_site.clone(),
                });
            }
        }

        let dt = self.physics_dt;
        let mut q: Vec<f64> = x.joint_pos.iter().copied().collect();
        let mut qd: Vec<f64> = x.joint_vel.iter().copied().collect();
        let mut obj_pose = x.object_pose;
        let mut obj_v = Vector3::new(x.object_vel[0], x.object_vel[1], x.object_vel[2]);
        let mut obj_w = Vector3::new(x.object_vel[3], x.object_vel[4], x.object_vel[5]);

        let (obj_mass, inertia_body) = match &self.object {
            Some(obj) => (
                obj.mass * d.object_mass_scale,
                obj.shape.inertia_diag(obj.mass * d.object_mass_scale),
            ),
            None => (0.0, Vector3::zeros()),
        };

        let mut virtual_events = 0usize;
        let mut virtual_force_max = 0.0_f64;

        for _ in 0..self.substeps {
            let kin = self.forward_kinematics(&q);
            let mut tau = vec![0.0; n];
            let mut obj_force = Vector3::zeros();
            let mut obj_torque = Vector3::zeros();

            // PD actuation toward the setpoints
            for j in 0..n {
                tau[j] += self.joints[j].kp * (setpoint[j] - q[j]) - self.joints[j].kd * qd[j];
            }

            // gravity loading of robot links
            for (bi, body) in self.bodies.iter().enumerate() {
                if body.mass > 0.0 {
                    let com_w = kin.body_pose[bi].transform_point(&body.com.into()).coords;
                    self.apply_to_joints(kin_ref(&kin), bi, com_w, self.gravity * body.mass, &mut tau);
                }
            }

            if self.object.is_some() {
                obj_force += self.gravity * obj_mass;
            }

            self.contact_forces(
                &kin, &obj_pose, obj_v, obj_w, &qd, d, &mut tau, &mut obj_force, &mut obj_torque,
            );

            // virtual guidance forces
            for cmd in virtual_cmds {
                let rs = &self.sites[self.site_index[&cmd.robot_site]];
                let os = &self.sites[self.site_index[&cmd.object_site]];
                let p_r = self.site_world(&kin, &obj_pose, rs);
                let p_o = self.site_world(&kin, &obj_pose, os);
                let delta = (p_r - p_o) - cmd.target_rel_pos;
                let dist = delta.norm();
                let violation = dist - cmd.bound.max(0.0).sqrt();
                if violation > 0.0 && dist > 1e-12 {
                    let f_mag = cmd.stiffness * violation;
                    let f_on_robot = -delta / dist * f_mag;
                    if let SiteBody::Robot(b) = rs.body {
                        self.apply_to_joints(&kin, b, p_r, f_on_robot, &mut tau);
                    }
                    if matches!(os.body, SiteBody::Object) {
                        obj_force -= f_on_robot;
                        obj_torque += (p_o - obj_pose.position).cross(&(-f_on_robot));
                    }
                    virtual_events += 1;
                    virtual_force_max = virtual_force_max.max(f_mag);
                }
            }

            // timed external forces (physics-variation augmentation)
            for ext in &self.external_forces {
                if t >= ext.steps.0 && t < ext.steps.1 {
                    if let Some(&si) = self.site_index.get(&ext.site) {
                        let s = &self.sites[si];
                        if let SiteBody::Robot(b) = s.body {
                            let p = self.site_world(&kin, &obj_pose, s);
                            self.apply_to_joints(&kin, b, p, ext.force, &mut tau);
                        }
                    }
                }
            }

            // semi-implicit Euler
            for j in 0..n {
                let qdd = tau[j] / self.joints[j].armature;
                qd[j] += qdd * dt;
                q[j] += qd[j] * dt;
            }
            if self.object.is_some() {
                let r = obj_pose.orientation.to_rotation_matrix();
                let inertia_w =
                    r.matrix() * Matrix3::from_diagonal(&inertia_body) * r.matrix().transpose();
                let ang_mom = inertia_w * obj_w;
                let alpha = inertia_w
                    .try_inverse()
                    .map(|inv| inv * (obj_torque - obj_w.cross(&ang_mom)))
                    .unwrap_or_else(Vector3::zeros);
                obj_v += obj_force / obj_mass * dt;
                obj_w += alpha * dt;
                obj_pose.position += obj_v * dt;
                let dq = UnitQuaternion::from_scaled_axis(obj_w * dt);
                obj_pose = Pose::from_parts(obj_pose.position, dq * obj_pose.orientation);
            }

            let finite = q.iter().chain(qd.iter()).all(|v| v.is_finite())
                && obj_pose.position.iter().all(|v| v.is_finite())
                && obj_v.iter().all(|v| v.is_finite())
                && obj_w.iter().all(|v| v.is_finite());
            let bounded = q.iter().chain(qd.iter()).all(|v| v.abs() <= DIVERGENCE_LIMIT)
                && obj_pose.position.iter().all(|v| v.abs() <= DIVERGENCE_LIMIT)
                && obj_v.iter().all(|v| v.abs() <= DIVERGENCE_LIMIT)
                && obj_w.iter().all(|v| v.abs() <= DIVERGENCE_LIMIT);
            if !finite || !bounded {
                return Err(DynamicsError::Diverged { step: t });
            }
        }

        let mut state = x.clone();
        for j in 0..n {
            state.joint_pos[j] = q[j];
            state.joint_vel[j] = qd[j];
        }
        if self.object.is_some() {
            state.object_pose = obj_pose;
            state.object_vel[0] = obj_v.x;
            state.object_vel[1] = obj_v.y;
            state.object_vel[2] = obj_v.z;
            state.object_vel[3] = obj_w.x;
            state.object_vel[4] = obj_w.y;
            state.object_vel[5] = obj_w.z;
        }
        Ok(StepResult {
            state,
            virtual_events,
            virtual_force_max,
        })
    }
}

// helper so the closure-captured borrow above stays readable
fn kin_ref(k: &Kinematics) -> &Kinematics {
    k
}
