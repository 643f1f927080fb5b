/**
 * Connection-agnostic client state machine.
 *
 * The view model owns everything the DOM renders: session list, newest
 * frame mailbox, scene echo (the last state acknowledged by the simulation),
 * metadata document and connection status.  Every UI gesture maps to exactly
 * one outgoing message through the injected sender, which keeps the whole
 * thing testable without a browser.
 */

import { Mailbox } from "./mailbox.js";
import {
  ClientMessage,
  FrameMessage,
  SceneEcho,
  ServerMessage,
  SessionInfo,
  exitSim,
  listSessions,
  observeSession,
  pauseSim,
  resumeSim,
  setActiveSources,
  setCamera,
  setFunctorChain,
  setPeriod,
  setRange,
  setTransferFunction,
  stepSim,
} from "./protocol.js";
import { ControlPoint, serializePoints } from "./transfer.js";
import { Vec3, orbit, zoom } from "./camera.js";

export type ConnectionStatus = "connecting" | "connected" | "disconnected";

export interface Sender {
  send(message: ClientMessage): void;
}

export class ClientViewModel {
  sessions: SessionInfo[] = [];
  observed: SessionInfo | null = null;
  frames = new Mailbox<FrameMessage>();
  sceneEcho: SceneEcho | null = null;
  metadata: Record<string, unknown> = {};
  status: ConnectionStatus = "connecting";
  lastError: string | null = null;
  framesReceived = 0;
  lastStep = -1;
  changed = false; // dirty flag for the DOM layer

  constructor(private sender: Sender) {}

  private send(message: ClientMessage): void {
    this.sender.send(message);
  }

  private touch(): void {
    this.changed = true;
  }

  // -- inbound ------------------------------------------------------------

  onStatus(status: ConnectionStatus): void {
    this.status = status;
    if (status === "connected") {
      this.send(listSessions());
      if (this.observed !== null) {
        this.send(observeSession(this.observed.id));
      }
    }
    this.touch();
  }

  onServerMessage(message: ServerMessage): void {
    switch (message.type) {
      case "sessions": {
        this.sessions = message.sessions;
        if (this.observed !== null) {
          const still = message.sessions.find((s) => s.id === this.observed!.id);
          if (!still) {
            this.observed = null;
          }
        }
        break;
      }
      case "frame": {
        this.frames.put(message);
        this.framesReceived += 1;
        this.lastStep = message.step;
        this.metadata = message.metadata ?? {};
        if (message.scene) {
          this.sceneEcho = message.scene;
        }
        break;
      }
      case "observing":
        this.observed = this.sessions.find((s) => s.id === message.session_id) ?? this.observed;
        break;
      case "error":
        this.lastError = message.error;
        break;
      case "registered":
        break;
    }
    this.touch();
  }

  // -- gestures (one message each) ------------------------------------------

  refreshSessions(): void {
    this.send(listSessions());
  }

  observe(sessionId: number): void {
    this.send(observeSession(sessionId));
  }

  pause(): void {
    this.send(pauseSim());
  }

  resume(): void {
    this.send(resumeSim());
  }

  stepOnce(): void {
    this.send(stepSim());
  }

  exit(): void {
    this.send(exitSim());
  }

  submitChain(sourceId: number, text: string): void {
    this.send(setFunctorChain(sourceId, text));
  }

  submitRange(sourceId: number, min: number, max: number): void {
    this.send(setRange(sourceId, min, max));
  }

  submitPeriod(value: number): void {
    this.send(setPeriod(value));
  }

  submitTransferFunction(sourceId: number, points: ControlPoint[]): void {
    this.send(setTransferFunction(sourceId, serializePoints(points)));
  }

  toggleSource(sourceId: number): void {
    const active = new Set(this.sceneEcho?.settings.active_set ?? []);
    if (active.has(sourceId)) {
      active.delete(sourceId);
    } else {
      active.add(sourceId);
    }
    this.send(setActiveSources([...active].sort((a, b) => a - b)));
  }

  isActive(sourceId: number): boolean {
    return (this.sceneEcho?.settings.active_set ?? []).includes(sourceId);
  }

  chainText(sourceId: number): string {
    return this.sceneEcho?.chain_texts?.[String(sourceId)] ?? "";
  }

  valueRange(sourceId: number): [number, number] {
    const range = this.sceneEcho?.value_ranges?.[String(sourceId)];
    return range ? [range[0], range[1]] : [0, 1];
  }

  dragCamera(dYaw: number, dPitch: number): void {
    if (!this.sceneEcho) {
      return;
    }
    const cam = this.sceneEcho.camera;
    const position = orbit(
      cam.position as Vec3,
      cam.look_at as Vec3,
      dYaw,
      dPitch,
    );
    this.send(setCamera(position, cam.look_at, cam.up));
  }

  zoomCamera(factor: number): void {
    if (!this.sceneEcho) {
      return;
    }
    const cam = this.sceneEcho.camera;
    const position = zoom(cam.position as Vec3, cam.look_at as Vec3, factor);
    this.send(setCamera(position, cam.look_at, cam.up));
  }
}
