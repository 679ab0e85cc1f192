// DOM construction and rendering. Plain DOM, no framework; the page is
// served as static files and talks to the backend over JSON.

import { ChatController, ComparePane, validatePersonaForm } from './state.js';
import { PersonaJson } from './api.js';

export const LOCATIONS = [
  'ashvale', 'brimford', 'cradley', 'dunmore', 'eastwick',
  'farrowden', 'glenbrook', 'harwick', 'ilverton', 'juneberry',
];
export const GENDER_OPTIONS = ['female', 'male', 'unspecified'];

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export interface AppElements {
  root: HTMLDivElement;
  transcript: HTMLDivElement;
  input: HTMLInputElement;
  sendButton: HTMLButtonElement;
  compareButton: HTMLButtonElement;
  newSessionButton: HTMLButtonElement;
  errorBanner: HTMLDivElement;
  slider: HTMLInputElement;
  sliderValue: HTMLSpanElement;
  autoToggle: HTMLInputElement;
  genderSelect: HTMLSelectElement;
  locationSelect: HTMLSelectElement;
  tagsInput: HTMLInputElement;
  personaApply: HTMLButtonElement;
  comparePanel: HTMLDivElement;
}

export function buildApp(): AppElements {
  const root = el('div', 'app');

  const errorBanner = el('div', 'error-banner');
  errorBanner.hidden = true;

  const transcript = el('div', 'transcript');

  const input = el('input', 'message-input') as HTMLInputElement;
  input.type = 'text';
  input.placeholder = 'say something...';
  const sendButton = el('button', 'send', 'send');
  const compareButton = el('button', 'compare', 'compare 0 vs 1');
  const newSessionButton = el('button', 'new-session', 'new session');
  newSessionButton.hidden = true;

  // persona weight control: auto toggle is distinct from the slider position
  const autoToggle = el('input') as HTMLInputElement;
  autoToggle.type = 'checkbox';
  autoToggle.checked = true;
  autoToggle.id = 'alpha-auto';
  const autoLabel = el('label', 'alpha-auto-label', 'auto weight');
  autoLabel.htmlFor = 'alpha-auto';
  const slider = el('input', 'alpha-slider') as HTMLInputElement;
  slider.type = 'range';
  slider.min = '0';
  slider.max = '1';
  slider.step = '0.01';
  slider.value = '0.50';
  slider.disabled = true;
  const sliderValue = el('span', 'alpha-value', '0.50');

  const genderSelect = el('select', 'gender') as HTMLSelectElement;
  for (const g of GENDER_OPTIONS) {
    const opt = el('option', undefined, g) as HTMLOptionElement;
    opt.value = g;
    genderSelect.append(opt);
  }
  genderSelect.value = 'unspecified';
  const locationSelect = el('select', 'location') as HTMLSelectElement;
  for (const loc of LOCATIONS) {
    const opt = el('option', undefined, loc) as HTMLOptionElement;
    opt.value = loc;
    locationSelect.append(opt);
  }
  const tagsInput = el('input', 'tags') as HTMLInputElement;
  tagsInput.type = 'text';
  tagsInput.placeholder = 'tags, comma separated';
  const personaApply = el('button', 'persona-apply', 'apply persona');

  const personaForm = el('div', 'persona-form');
  personaForm.append(
    el('span', 'form-label', 'gender'), genderSelect,
    el('span', 'form-label', 'location'), locationSelect,
    el('span', 'form-label', 'tags'), tagsInput,
    personaApply,
  );

  const alphaRow = el('div', 'alpha-row');
  alphaRow.append(autoToggle, autoLabel, slider, sliderValue);

  const composer = el('div', 'composer');
  composer.append(input, sendButton, compareButton, newSessionButton);

  const comparePanel = el('div', 'compare-panel');
  comparePanel.hidden = true;

  root.append(errorBanner, personaForm, alphaRow, transcript, comparePanel, composer);
  return {
    root, transcript, input, sendButton, compareButton, newSessionButton,
    errorBanner, slider, sliderValue, autoToggle, genderSelect, locationSelect,
    tagsInput, personaApply, comparePanel,
  };
}

export function renderTranscript(elements: AppElements, controller: ChatController): void {
  const box = elements.transcript;
  box.textContent = '';
  for (const bubble of controller.state.transcript) {
    const node = el('div', `bubble ${bubble.role}`);
    node.append(el('div', 'text', bubble.text));
    if (bubble.role === 'agent' && bubble.alphaUsed !== undefined) {
      const badgeClass =
        bubble.alphaSource === 'predicted' ? 'alpha-badge predicted' : 'alpha-badge fixed';
      const label =
        bubble.alphaSource === 'predicted'
          ? `alpha ${bubble.alphaUsed.toFixed(2)} (predicted)`
          : `alpha ${bubble.alphaUsed.toFixed(2)}`;
      node.append(el('span', badgeClass, label));
    }
    box.append(node);
  }
  box.scrollTop = box.scrollHeight;
}

export function renderError(elements: AppElements, controller: ChatController): void {
  const { error, sessionLost } = controller.state;
  elements.errorBanner.hidden = !error;
  elements.errorBanner.textContent = error ?? '';
  elements.newSessionButton.hidden = !sessionLost;
}

export function renderComparePanes(
  elements: AppElements,
  panes: [ComparePane, ComparePane],
  message: string,
): void {
  const panel = elements.comparePanel;
  panel.textContent = '';
  panel.hidden = false;
  panel.append(el('div', 'compare-message', `"${message}"`));
  const row = el('div', 'compare-row');
  for (const pane of panes) {
    const paneEl = el('div', 'compare-pane');
    paneEl.append(el('div', 'compare-label', `alpha = ${pane.alpha}`));
    paneEl.append(el('div', 'compare-text', pane.response));
    row.append(paneEl);
  }
  panel.append(row);
}

export function readPersonaForm(elements: AppElements): PersonaJson {
  const tags = elements.tagsInput.value
    .split(',')
    .map((t) => t.trim())
    .filter((t) => t.length > 0);
  return {
    gender: elements.genderSelect.value,
    location: elements.locationSelect.value,
    tags,
  };
}

export function wire(elements: AppElements, controller: ChatController): void {
  const sync = () => {
    renderTranscript(elements, controller);
    renderError(elements, controller);
    elements.sendButton.disabled = controller.state.pending;
    elements.input.disabled = controller.state.pending;
  };

  elements.autoToggle.addEventListener('change', () => {
    const auto = elements.autoToggle.checked;
    elements.slider.disabled = auto;
    controller.state.alpha = auto
      ? { mode: 'auto' }
      : { mode: 'manual', value: Number(elements.slider.value) };
  });
  elements.slider.addEventListener('input', () => {
    elements.sliderValue.textContent = Number(elements.slider.value).toFixed(2);
    if (!elements.autoToggle.checked) {
      controller.state.alpha = { mode: 'manual', value: Number(elements.slider.value) };
    }
  });

  const send = async () => {
    const text = elements.input.value.trim();
    if (!text) return;
    sync();
    const resp = await controller.send(text);
    if (resp !== null) elements.input.value = '';
    sync();
  };
  elements.sendButton.addEventListener('click', () => void send());
  elements.input.addEventListener('keydown', (ev) => {
    if ((ev as KeyboardEvent).key === 'Enter') void send();
  });

  elements.personaApply.addEventListener('click', async () => {
    const persona = readPersonaForm(elements);
    const problem = validatePersonaForm(persona);
    if (problem) {
      controller.state.error = problem;
      sync();
      return;
    }
    await controller.updatePersona(persona);
    sync();
  });

  elements.compareButton.addEventListener('click', async () => {
    const text = elements.input.value.trim();
    if (!text) return;
    const panes = await controller.compare(text);
    if (panes) renderComparePanes(elements, panes, text);
    sync();
  });

  elements.newSessionButton.addEventListener('click', async () => {
    await controller.start(controller.state.persona);
    controller.state.transcript = [];
    sync();
  });

  sync();
}
