import { ChatApi } from './api.js';
import { ChatController } from './state.js';
import { buildApp, wire } from './ui.js';

const params = new URLSearchParams(window.location.search);
const baseUrl = params.get('api') ?? 'http://localhost:8765';

const api = new ChatApi(baseUrl);
const controller = new ChatController(api);
const elements = buildApp();
document.body.append(elements.root);

controller
  .start()
  .then(() => wire(elements, controller))
  .catch((err) => {
    elements.errorBanner.hidden = false;
    elements.errorBanner.textContent = `cannot reach backend at ${baseUrl}: ${err}`;
    document.body.append(elements.errorBanner);
  });
