/**
 * DOM wiring: WebSocket with reconnect/backoff, canvas painting from the
 * frame mailbox, and the control panel emitting steering messages.
 */

import { decodeRawFrame, pngDataUrl, FrameDecodeError } from "./frames.js";
import { parseServerMessage, ClientMessage } from "./protocol.js";
import { ControlPoint, defaultPoints, normalizePoints } from "./transfer.js";
import { ClientViewModel } from "./viewmodel.js";

class SocketClient {
  private socket: WebSocket | null = null;
  private backoff = 500;

  constructor(private url: string, private vm: ClientViewModel) {}

  connect(): void {
    this.vm.onStatus("connecting");
    const socket = new WebSocket(this.url);
    this.socket = socket;
    socket.onopen = () => {
      this.backoff = 500;
      this.vm.onStatus("connected");
    };
    socket.onmessage = (event) => {
      const message = parseServerMessage(String(event.data));
      if (message) {
        this.vm.onServerMessage(message);
      }
    };
    socket.onclose = () => {
      this.vm.onStatus("disconnected");
      setTimeout(() => this.connect(), this.backoff);
      this.backoff = Math.min(this.backoff * 2, 10_000);
    };
    socket.onerror = () => socket.close();
  }

  send(message: ClientMessage): void {
    if (this.socket && this.socket.readyState === WebSocket.OPEN) {
      this.socket.send(JSON.stringify(message));
    }
  }
}

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function renderMetadataTree(doc: unknown, root: HTMLElement): void {
  root.textContent = "";
  root.appendChild(buildTree(doc));
}

function buildTree(value: unknown): Node {
  if (Array.isArray(value) || (value !== null && typeof value === "object")) {
    const entries = Array.isArray(value)
      ? value.map((v, i) => [String(i), v] as const)
      : Object.entries(value as Record<string, unknown>);
    const container = document.createElement("div");
    for (const [key, child] of entries) {
      if (child !== null && typeof child === "object") {
        const details = document.createElement("details");
        details.open = true;
        const summary = document.createElement("summary");
        summary.textContent = key;
        details.appendChild(summary);
        details.appendChild(buildTree(child));
        container.appendChild(details);
      } else {
        const row = document.createElement("div");
        row.className = "meta-row";
        row.textContent = `${key}: ${JSON.stringify(child)}`;
        container.appendChild(row);
      }
    }
    return container;
  }
  const leaf = document.createElement("div");
  leaf.textContent = JSON.stringify(value);
  return leaf;
}

function main(): void {
  const params = new URLSearchParams(location.search);
  const gateway = params.get("gateway") ?? `ws://${location.hostname || "127.0.0.1"}:23101`;

  const vm = new ClientViewModel({ send: (m) => client.send(m) });
  const client = new SocketClient(gateway, vm);

  const canvas = el<HTMLCanvasElement>("frame-canvas");
  const ctx2d = canvas.getContext("2d")!;
  const status = el<HTMLSpanElement>("status");
  const stepLabel = el<HTMLSpanElement>("step");
  const sessionSelect = el<HTMLSelectElement>("sessions");
  const sourceList = el<HTMLDivElement>("sources");
  const chainInput = el<HTMLInputElement>("chain-text");
  const chainSource = el<HTMLSelectElement>("chain-source");
  const rangeMin = el<HTMLInputElement>("range-min");
  const rangeMax = el<HTMLInputElement>("range-max");
  const periodInput = el<HTMLInputElement>("period");
  const tfTable = el<HTMLTableSectionElement>("tf-points");
  const metadataPanel = el<HTMLDivElement>("metadata");
  const errorLabel = el<HTMLDivElement>("error");

  let tfPoints: ControlPoint[] = defaultPoints();

  el<HTMLButtonElement>("pause").onclick = () => vm.pause();
  el<HTMLButtonElement>("resume").onclick = () => vm.resume();
  el<HTMLButtonElement>("step-once").onclick = () => vm.stepOnce();
  el<HTMLButtonElement>("exit").onclick = () => {
    if (confirm("Exit the running simulation?")) {
      vm.exit();
    }
  };
  el<HTMLButtonElement>("refresh").onclick = () => vm.refreshSessions();
  sessionSelect.onchange = () => vm.observe(Number(sessionSelect.value));
  el<HTMLFormElement>("chain-form").onsubmit = (event) => {
    event.preventDefault();
    vm.submitChain(Number(chainSource.value), chainInput.value);
  };
  el<HTMLFormElement>("range-form").onsubmit = (event) => {
    event.preventDefault();
    vm.submitRange(Number(chainSource.value), Number(rangeMin.value), Number(rangeMax.value));
  };
  periodInput.onchange = () => vm.submitPeriod(Number(periodInput.value));
  el<HTMLButtonElement>("tf-add").onclick = () => {
    tfPoints.push({ t: 0.5, r: 1, g: 1, b: 1, a: 0.5 });
    paintTfEditor();
  };
  el<HTMLButtonElement>("tf-send").onclick = () => {
    tfPoints = normalizePoints(tfPoints);
    paintTfEditor();
    vm.submitTransferFunction(Number(chainSource.value), tfPoints);
  };

  // Camera drag + wheel zoom on the canvas.
  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  canvas.onmousedown = (event) => {
    dragging = true;
    lastX = event.clientX;
    lastY = event.clientY;
  };
  window.addEventListener("mouseup", () => (dragging = false));
  window.addEventListener("mousemove", (event) => {
    if (!dragging) {
      return;
    }
    const dYaw = (event.clientX - lastX) * 0.01;
    const dPitch = (event.clientY - lastY) * 0.01;
    lastX = event.clientX;
    lastY = event.clientY;
    vm.dragCamera(dYaw, dPitch);
  });
  canvas.onwheel = (event) => {
    event.preventDefault();
    vm.zoomCamera(event.deltaY > 0 ? 1.1 : 0.9);
  };

  function paintTfEditor(): void {
    tfTable.textContent = "";
    tfPoints.forEach((point, index) => {
      const row = document.createElement("tr");
      (["t", "r", "g", "b", "a"] as const).forEach((channel) => {
        const cell = document.createElement("td");
        const input = document.createElement("input");
        input.type = "number";
        input.step = "0.05";
        input.min = "0";
        input.max = "1";
        input.value = String(point[channel]);
        input.onchange = () => {
          point[channel] = Number(input.value);
        };
        cell.appendChild(input);
        row.appendChild(cell);
      });
      const remove = document.createElement("td");
      const button = document.createElement("button");
      button.textContent = "x";
      button.onclick = () => {
        tfPoints.splice(index, 1);
        paintTfEditor();
      };
      remove.appendChild(button);
      row.appendChild(remove);
      tfTable.appendChild(row);
    });
  }

  function repaintControls(): void {
    status.textContent = vm.status;
    status.className = `status-${vm.status}`;
    errorLabel.textContent = vm.lastError ?? "";
    stepLabel.textContent = vm.lastStep >= 0 ? String(vm.lastStep) : "-";

    const options = vm.sessions
      .map((s) => `<option value="${s.id}">${s.name} (${s.ranks} ranks)</option>`)
      .join("");
    if (sessionSelect.innerHTML !== options) {
      sessionSelect.innerHTML = options;
      if (vm.sessions.length && !vm.observed) {
        vm.observe(vm.sessions[0].id);
      }
    }
    const observed = vm.observed;
    if (observed) {
      const sourceOptions = observed.sources
        .map((s, i) => `<option value="${i}">${s.name} (dim ${s.feature_dim})</option>`)
        .join("");
      if (chainSource.innerHTML !== sourceOptions) {
        chainSource.innerHTML = sourceOptions;
      }
      sourceList.textContent = "";
      observed.sources.forEach((source, sid) => {
        const label = document.createElement("label");
        const box = document.createElement("input");
        box.type = "checkbox";
        box.checked = vm.isActive(sid);
        box.onchange = () => vm.toggleSource(sid);
        label.appendChild(box);
        label.appendChild(document.createTextNode(` ${source.name}`));
        sourceList.appendChild(label);
      });
    }
    if (vm.sceneEcho) {
      if (document.activeElement !== chainInput) {
        chainInput.value = vm.chainText(Number(chainSource.value || 0));
      }
      const [lo, hi] = vm.valueRange(Number(chainSource.value || 0));
      if (document.activeElement !== rangeMin) {
        rangeMin.value = String(lo);
      }
      if (document.activeElement !== rangeMax) {
        rangeMax.value = String(hi);
      }
      if (document.activeElement !== periodInput) {
        periodInput.value = String(vm.sceneEcho.render_period);
      }
    }
    renderMetadataTree(vm.metadata, metadataPanel);
  }

  function frameLoop(): void {
    const frame = vm.frames.take();
    if (frame) {
      try {
        if (frame.image.encoding === "raw-rgba8") {
          const decoded = decodeRawFrame(frame.image);
          canvas.width = decoded.width;
          canvas.height = decoded.height;
          ctx2d.putImageData(
            new ImageData(decoded.rgba, decoded.width, decoded.height), 0, 0,
          );
        } else if (frame.image.encoding === "png") {
          const img = new Image();
          img.onload = () => {
            canvas.width = img.width;
            canvas.height = img.height;
            ctx2d.drawImage(img, 0, 0);
          };
          img.src = pngDataUrl(frame.image);
        } else {
          throw new FrameDecodeError(`unsupported encoding ${frame.image.encoding}`);
        }
      } catch (error) {
        vm.lastError = String(error);
      }
    }
    if (vm.changed) {
      vm.changed = false;
      repaintControls();
    }
    requestAnimationFrame(frameLoop);
  }

  paintTfEditor();
  client.connect();
  requestAnimationFrame(frameLoop);
}

main();
